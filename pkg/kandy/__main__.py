import sys

from kandy.main import main

sys.exit(main())
