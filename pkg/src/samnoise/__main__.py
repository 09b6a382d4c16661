import sys

from samnoise.cli import main

sys.exit(main())
