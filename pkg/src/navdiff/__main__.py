import sys

from navdiff.harness.cli import main

sys.exit(main())
