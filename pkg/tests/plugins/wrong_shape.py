import sys
from pathlib import Path

Path(sys.argv[1], "imputed.csv").write_text("1,2\n")
