import sys

from gpvol.cli import main

sys.exit(main())
