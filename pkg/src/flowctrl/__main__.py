import sys

from flowctrl.cli import main

sys.exit(main())
