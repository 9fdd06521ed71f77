# src/logger.py
import csv
import math
import os
from typing import Dict, List, Sequence

import pandas as pd

FLOAT_FORMAT = '%.17g'


def _format(value) -> str:
    if isinstance(value, float):
        return '' if math.isnan(value) else FLOAT_FORMAT % value
    return str(value)


class MetricsLogger:
    """Streams metric rows to a CSV file with a fixed header."""

    def __init__(self, filename: str, columns: Sequence[str]):
        self.filename = filename
        self.columns: List[str] = list(columns)
        self.rows_written = 0
        self.initialize_csv()

    def initialize_csv(self):
        """Start the file fresh with the header row."""
        directory = os.path.dirname(self.filename)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(self.filename, 'w', newline='') as file:
            csv.writer(file).writerow(self.columns)

    def log_row(self, row: Dict):
        """Append one row; missing columns are left empty."""
        with open(self.filename, 'a', newline='') as file:
            csv.writer(file).writerow([_format(row.get(column, '')) for column in self.columns])
        self.rows_written += 1

    def __call__(self, row: Dict):
        self.log_row(row)


def write_frame(frame: pd.DataFrame, filename: str) -> str:
    """Write a result table with bit-faithful floats and no index."""
    directory = os.path.dirname(filename)
    if directory:
        os.makedirs(directory, exist_ok=True)
    frame.to_csv(filename, index=False, float_format=FLOAT_FORMAT)
    return filename
