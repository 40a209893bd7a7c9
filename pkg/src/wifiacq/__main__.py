import sys

from .acqcli import main

sys.exit(main())
