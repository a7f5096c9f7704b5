import sys

import snulab.main

if __name__ == "__main__":
    sys.exit(snulab.main.main())
