from signfed.cli import main
import sys

sys.exit(main())
