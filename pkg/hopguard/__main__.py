import sys

from hopguard.cli import main

sys.exit(main())
