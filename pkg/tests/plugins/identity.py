"""Echo the zero-filled features back as the imputation."""
import shutil
import sys
from pathlib import Path

root = Path(sys.argv[1])
shutil.copy(root / "features.csv", root / "imputed.csv")
