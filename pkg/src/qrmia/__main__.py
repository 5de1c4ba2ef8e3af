import sys

from qrmia.cli import main

sys.exit(main())
