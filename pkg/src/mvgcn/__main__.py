import sys

from mvgcn.cli import main

sys.exit(main())
