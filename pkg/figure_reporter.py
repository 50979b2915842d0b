#!/usr/bin/env python3
"""
Writes the tables of the one-dimensional illustration as CSV files.
"""

import logging
import os
from typing import Dict

from bench import Figure1Data
from trace_reporter import csv_cell, open_csv


class FigureReporter:

    def write_table(self, data: Figure1Data, name: str, file) -> None:
        header, rows = data.tables[name]
        writer = open_csv(file)
        writer.writerow(header)
        writer.writerows([[csv_cell(v) for v in row] for row in rows])

    def write_figure_report(self, data: Figure1Data, output_folder: str) -> Dict[str, str]:
        """One fig1_<table>.csv per table; returns the written paths by table name."""
        os.makedirs(output_folder, exist_ok=True)
        paths = {}
        for name in data.tables:
            path = os.path.join(output_folder, f'fig1_{name}.csv')
            try:
                logging.info(f"Writing figure table {name} to {path}")
                with open(path, 'w', encoding='utf-8', newline='') as f:
                    self.write_table(data, name, f)
            except Exception as e:
                logging.exception(f"Failed to write figure table {name}: {e}")
                raise
            paths[name] = path
        return paths
