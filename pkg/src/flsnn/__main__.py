import sys

from flsnn.cli import main

sys.exit(main())
