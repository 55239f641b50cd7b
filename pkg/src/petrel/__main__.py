import sys

from petrel.cli import main

sys.exit(main())
