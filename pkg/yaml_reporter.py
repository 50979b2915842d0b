#!/usr/bin/env python3
"""
YAML репортер метаданных эксперимента: конфигурация, сиды повторов,
аффинные преобразования модели, флаги завершения и ошибки.
"""

import sys
from datetime import datetime
from typing import Any, Dict, List

import yaml

from bo_models import ReplicationResult


class YAMLReporter:
    """Генерирует YAML отчет о запуске эксперимента."""

    def generate_report(self, config: Dict[str, Any], results: List[ReplicationResult]) -> Dict[str, Any]:
        report = {
            'run_metadata': {
                'generated_at': datetime.now().isoformat(),
                'replications': len(results),
                'completed': sum(1 for r in results if r.completed),
            },
            'config': config,
            'replications': [self._format_replication(r) for r in results],
        }
        return report

    def _format_replication(self, result: ReplicationResult) -> Dict[str, Any]:
        entry = {
            'replication': result.replication,
            'seed': result.seed,
            'completed': result.completed,
        }
        trace = result.trace
        if trace is not None:
            entry['iterations'] = len(trace.iterations)
            entry['evaluations'] = trace.eval_count
            entry['initial_design'] = len(trace.initial_design)
            entry['normalization'] = {
                'lower': [float(v) for v in trace.bounds[:, 0]],
                'upper': [float(v) for v in trace.bounds[:, 1]],
                'value_shift': float(trace.value_shift),
                'value_scale': float(trace.value_scale),
            }
            entry['hyper_digests'] = [record.hyper_digest for record in trace.iterations]
        failure = result.failure or (trace.failure if trace is not None else None)
        if failure:
            entry['failure'] = failure
        return entry

    def write_yaml_report(self, config: Dict[str, Any], results: List[ReplicationResult], file=sys.stdout) -> None:
        report = self.generate_report(config, results)
        yaml.safe_dump(report, file, default_flow_style=False, allow_unicode=True, sort_keys=False, indent=2)
