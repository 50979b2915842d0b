#!/usr/bin/env python3
"""
Aggregated regret reporter: per-iteration statistics of log10 immediate regret
over the completed replications of an experiment.
"""

import sys
from dataclasses import dataclass
from typing import List, Optional, TextIO

import numpy as np

from bench import BenchmarkDef, immediate_regret
from bo_models import ReplicationResult
from trace_reporter import csv_cell, open_csv


@dataclass
class AggregateRow:
    iteration: int
    eval_count: int
    mean_log10_regret: float
    std_log10_regret: float
    completed: int


class SummaryReporter:
    """Aggregates log10 regret across replications, one row per iteration."""

    HEADER = ['iteration', 'eval_count', 'mean_log10_regret', 'std_log10_regret', 'completed']

    def aggregate(self, results: List[ReplicationResult], bench: BenchmarkDef,
                  iterations: int, q: int) -> List[AggregateRow]:
        """Incomplete replications are left out of the statistics; their partial traces are still written."""
        curves = []
        for result in results:
            if not result.completed:
                continue
            curves.append([immediate_regret(bench, record.recommendation)[1] for record in result.trace.iterations])

        rows = []
        for t in range(iterations):
            values = np.array([curve[t] for curve in curves])
            mean = float(np.mean(values)) if values.size else float('nan')
            std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0 if values.size else float('nan')
            rows.append(AggregateRow(t + 1, (t + 1) * q, mean, std, len(curves)))
        return rows

    def write_summary_report(self, rows: List[AggregateRow], file: TextIO = sys.stdout) -> None:
        writer = open_csv(file)
        writer.writerow(self.HEADER)
        for row in rows:
            writer.writerow([str(row.iteration), str(row.eval_count), csv_cell(row.mean_log10_regret),
                             csv_cell(row.std_log10_regret), str(row.completed)])

    def final_median(self, results: List[ReplicationResult], bench: BenchmarkDef) -> Optional[float]:
        """Median log10 regret at the last iteration of the completed replications."""
        finals = [immediate_regret(bench, r.trace.iterations[-1].recommendation)[1]
                  for r in results if r.completed and r.trace.iterations]
        return float(np.median(finals)) if finals else None
