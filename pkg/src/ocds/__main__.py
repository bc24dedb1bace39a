import sys

from ocds.cli import main

sys.exit(main())
