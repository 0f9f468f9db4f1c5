import sys

from geoinfra.cli import main

sys.exit(main())
