import sys

from spec_compare.cli import main

sys.exit(main())
