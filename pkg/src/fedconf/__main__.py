from fedconf.cli import main
import sys

sys.exit(main())
