import sys

from mass.cli import main

sys.exit(main())
