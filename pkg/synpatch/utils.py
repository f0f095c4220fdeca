# Core Python imports.
import hashlib
import json
import os
import sys
import tempfile

# 3rd party imports.
from loguru import logger
from tqdm import tqdm

#------------------------------------------------------------------------------
# Constants.
__version__ = "0.1.0"

# Attention heads scaled by default when steering, as "layer.head".
default_steering_heads = ("7.5", "7.6", "9.2")

# Scaling factors evaluated by default when steering.
default_alpha_grid = (0.8, 1.0, 1.2, 1.5)

# Log levels at or below which progress bars are shown.
_progress_levels = ("TRACE", "DEBUG", "INFO")
_log_level = "INFO"

#------------------------------------------------------------------------------
# Logging and progress.

def configure_logging(level="INFO"):
    """ Replace loguru's default sink with a single stderr sink.
    """
    global _log_level
    _log_level = level.upper()
    logger.remove()
    logger.add(
        sys.stderr,
        level=_log_level,
        format="<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {name}:{function} - {message}"
    )

def progress(iterable, desc="", total=None):
    """ Wrap an iterable in a progress bar.

    The bar is hidden when logging is quieter than INFO.
    """
    return tqdm(
        iterable,
        desc=desc,
        total=total,
        disable=_log_level not in _progress_levels,
        leave=False
    )

#------------------------------------------------------------------------------
# Files.

def sha256_file(path):
    """ Hex sha256 digest of a file.
    """
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()

def write_atomic(path, text):
    """ Write text to path so readers never see a half written file.

    The text goes to a temporary file in the same directory which is then
    renamed over the target.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise

def dump_json(obj):
    """ Deterministic JSON text (sorted keys, trailing newline).
    """
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"

#------------------------------------------------------------------------------
# Grid type implementation.
class Grid:
    def __init__(self, rows, cols, default_value=None):
        """ Constructor.
        Initialise grid size of rows x cols.
        """

        # Initialise data structure.
        self.rows = []
        while len(self.rows) < rows:
            self.rows.append([default_value] * (cols))
        self.default_value = default_value

    def RowCount(self):
        """ Number of rows in grid.
        """
        return len(self.rows)

    def ColCount(self):
        """ Number of columns in grid.
        """
        if self.RowCount() == 0:
            return 0
        else:
            return len(self.rows[0])

    def Set(self, row_ind, col_ind, value):
        """ Set cell in grid to value.
        We address grid positions with indexes e.g. The first cell is 0,0.
        If the grid isn't big enough, we'll expand it as necessary.
        """

        # Lengths need to be 1 more than index.
        row_len = row_ind + 1
        col_len = col_ind + 1

        # Make sure existing rows are long enough.
        for row in self.rows:
            if len(row) < col_len:
                row.extend([self.default_value] * (col_len - len(row)))

        # Make sure we have enough rows.
        while len(self.rows) < row_len:
            self.rows.append([self.default_value] * max(col_len, self.ColCount()))

        # Now set value.
        self.rows[row_ind][col_ind] = value

    def Get(self, row_ind, col_ind):
        """ Get value at grid cell.
        Return None if index doesn't exist.
        """
        if (row_ind < 0) or (row_ind >= len(self.rows)):
            return None
        elif (col_ind < 0) or (col_ind >= len(self.rows[row_ind])):
            return None
        else:
            return self.rows[row_ind][col_ind]

    def GetRows(self):
        """ Get all rows in the grid.
        """
        return self.rows

    def Positions(self):
        """ Every (row, col) index pair, row-major.
        """
        for row_index, row in enumerate(self.rows):
            for col_index in range(len(row)):
                yield row_index, col_index
