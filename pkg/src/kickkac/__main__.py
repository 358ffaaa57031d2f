import sys

from kickkac.cli import main

sys.exit(main())
