import sys

from itdm.cli import main

sys.exit(main())
