import logging

import numpy as np
import pandas as pd

from hamflow.adjoint import (
    backward_transport, first_variation_check, implicit_condition_scan, midpoint_condition_scan, residual_sequence,
)
from hamflow.config import build_flowmap, build_scheme, build_system, draw_inputs, resolve_eps, resolve_workers
from hamflow.flowmap import IterateFlowMap, taylor_consistency
from hamflow.handlers import HamflowCommand, to_json

logger = logging.getLogger('hamflow.runs')


class Command(HamflowCommand):
    help = ('Checks the adjoint identities of the residual loss on a map: backward transport, first variation, '
            'transport-matrix conditioning and Taylor consistency.')
    subcommand = 'verify_adjoint'

    def run(self, config, out_dir):
        system = build_system(config)
        scheme = build_scheme(config, system)
        block = config['verify']
        seed = config['run']['seed']
        flow_map = IterateFlowMap(scheme) if block['map'] == 'iterates' else build_flowmap(config, system)
        eps = resolve_eps(system, block['eps'])
        grid = scheme.h * np.arange(int(round(block['T'] / scheme.h)) + 1)
        states, _ = draw_inputs(config, system, block['n_states'], seed_offset=4)
        u = states[0]

        chain = backward_transport(residual_sequence(flow_map, scheme, system, u, grid, eps),
                                   scheme, flow_map, system, u, eps)
        adjoint = pd.DataFrame({
            'step': np.arange(len(grid), dtype=np.int64),
            't': grid,
            'residual_norm': np.linalg.norm(chain.residuals, axis=-1),
            'defect': chain.defects,
            'transported_norm': np.linalg.norm(chain.transported, axis=-1),
            'condition_number': chain.condition_numbers,
        })
        summary = {
            'scheme': scheme.describe(),
            'grid': {'h': scheme.h, 'N': len(grid) - 1},
            'max_residual': chain.max_residual,
            'max_defect': float(np.max(chain.defects)),
            'forces_zero': chain.forces_zero,
            'singular_steps': chain.singular_steps,
        }

        if block['first_variation']:
            direction = np.random.default_rng(seed + 5).standard_normal(system.size)

            def psi(_, times):
                return block['psi_scale'] * np.sin(np.asarray(times) - grid[0])[:, None] * direction

            check = first_variation_check(flow_map, scheme, system, u, grid, psi, eps)
            summary['first_variation'] = {'lhs': check.lhs, 'rhs': check.rhs, 'gap': check.gap}

        workers = resolve_workers(config)
        if scheme.name == 'implicit_midpoint':
            report = midpoint_condition_scan(flow_map, system, states, grid, scheme.h, eps, workers)
        else:
            report = implicit_condition_scan(flow_map, scheme, system, states, grid, eps, workers)
        summary['conditions'] = {'kind': report.kind, 'passed': report.passed,
                                 'min_margin': float(np.min(report.min_margin))}

        taylor = getattr(flow_map, 'variable', flow_map)
        if block['taylor_states'] and hasattr(taylor, 'groups'):
            taylor_points, _ = draw_inputs(config, system, block['taylor_states'], seed_offset=6)
            summary['taylor'] = taylor_consistency(taylor, system, taylor_points, eps)

        (out_dir / 'verify.json').write_text(to_json(summary), encoding='utf-8')
        logger.info(f"[ADJOINT] {scheme.name} h={scheme.h:g} | max |w|: {chain.max_residual:.3e} "
                    f"| singular: {len(chain.singular_steps)} | conditions passed: {report.passed}")
        return [self.export(adjoint, out_dir, 'adjoint', config),
                self.export(report, out_dir, 'conditions', config),
                'verify.json']
