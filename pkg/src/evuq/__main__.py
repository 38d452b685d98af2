import sys

from evuq.cli import main

sys.exit(main())
