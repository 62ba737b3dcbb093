import sys

from ldelab.cli import main

sys.exit(main())
