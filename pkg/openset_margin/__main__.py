import sys

from openset_margin.main import main

sys.exit(main())
