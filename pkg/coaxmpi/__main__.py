import sys

from .app.main import main

# `python -m coaxmpi` runs the same entry point as the console script
sys.exit(main())
