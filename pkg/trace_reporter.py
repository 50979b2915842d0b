#!/usr/bin/env python3
"""
CSV репортер трасс: одна строка на итерацию оптимизации.
"""

import csv
import sys
from typing import List, Optional, TextIO

from bench import BenchmarkDef, immediate_regret
from bo_models import RunTrace


def csv_cell(value) -> str:
    """Exact decimal text for numbers, empty cell for None."""
    if value is None:
        return ''
    if isinstance(value, str):
        return value
    return repr(float(value))


def open_csv(file: TextIO):
    return csv.writer(file, lineterminator='\n')


class TraceReporter:
    """Writes the per-iteration trace of a single replication."""

    def header(self, dim: int) -> List[str]:
        return (['iteration', 'eval_count'] + [f'rec_x{i}' for i in range(dim)]
                + ['rec_value', 'regret', 'log10_regret', 'acq_value', 'wall_ms'])

    def rows(self, trace: RunTrace, bench: Optional[BenchmarkDef]) -> List[List[str]]:
        rows = []
        for record in trace.iterations:
            regret, log10_regret = immediate_regret(bench, record.recommendation) if bench else (None, None)
            rows.append([str(record.iteration), str(record.eval_count)]
                        + [csv_cell(v) for v in record.recommendation]
                        + [csv_cell(record.recommendation_value), csv_cell(regret), csv_cell(log10_regret),
                           csv_cell(record.acquisition_value), csv_cell(record.wall_ms)])
        return rows

    def write_trace_report(self, trace: RunTrace, bench: Optional[BenchmarkDef], file: TextIO = sys.stdout) -> None:
        writer = open_csv(file)
        dim = trace.bounds.shape[0] if trace.bounds is not None else len(trace.iterations[0].recommendation)
        writer.writerow(self.header(dim))
        writer.writerows(self.rows(trace, bench))
