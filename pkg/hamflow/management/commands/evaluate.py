import logging

import numpy as np

from hamflow.config import build_flowmap, draw_inputs, resolve_eps, resolve_workers
from hamflow.evalharness import (
    ErrorSeries, energy_exchange_profile, fit_error_growth, poincare_section, reference_rollout, rollout_errors,
    section_mismatch,
)
from hamflow.exceptions import InvalidParameter, UndefinedMetric
from hamflow.flowmap import rollout_compose
from hamflow.handlers import HamflowCommand, to_json
from hamflow.hamiltonians import AlphaParticle, FermiPastaUlam
from hamflow.workers import parallel_map

logger = logging.getLogger('hamflow.runs')


def _series(flow_map, system, u0, dt, K, eps, tol):
    return rollout_errors(flow_map, system, u0, dt, K, eps, tol)


class Command(HamflowCommand):
    help = 'Rolls out a trained checkpoint against the reference flow: errors, growth fit, sections, profiles.'
    subcommand = 'evaluate'

    def run(self, config, out_dir):
        flow_map = build_flowmap(config, None)
        system = flow_map.system
        if system.name != config['system']['name']:
            raise InvalidParameter(
                f"checkpoint was trained on '{system.name}', config names '{config['system']['name']}'")
        block = config['evaluate']
        eps = resolve_eps(system, block['eps'])
        dt = self.step(flow_map, block['dt'])

        if block['u0']:
            initial = np.asarray(block['u0'], dtype=np.float64)
        else:
            initial, _ = draw_inputs(config, system, block['n_initial'], seed_offset=2)
        jobs = [(flow_map, system, u0, dt, block['K'], eps, block['reference_tol']) for u0 in initial]
        series = parallel_map(_series, jobs, resolve_workers(config))

        mean = ErrorSeries(
            series[0].times,
            np.mean([s.traj_err for s in series], axis=0),
            np.mean([s.energy_err for s in series], axis=0),
        )
        summary = {'n_initial': len(initial), 'dt': dt, 'K': block['K'],
                   'final_traj_err': float(mean.traj_err[-1]), 'max_energy_err': float(mean.energy_err.max())}
        try:
            fit_error_growth(mean)
            summary.update(delta0=mean.delta0, rate=mean.rate, worst_case=mean.worst_case)
        except UndefinedMetric as exc:
            summary['growth_fit'] = exc.detail
        outputs = [self.export(mean, out_dir, 'errors', config)]

        if block['poincare'] and isinstance(system, AlphaParticle):
            outputs += self.sections(config, flow_map, system, initial[0], dt, eps, out_dir, summary)
        if block['profile'] and isinstance(system, FermiPastaUlam):
            states = np.concatenate([initial[:1], rollout_compose(flow_map, initial[0], dt, block['K'], eps)])
            times = dt * np.arange(block['K'] + 1)
            profile = energy_exchange_profile(system, (times, states), block['profile_stride'])
            outputs.append(self.export(profile, out_dir, 'profile', config))

        (out_dir / 'summary.json').write_text(to_json(summary), encoding='utf-8')
        logger.info(f"[EVALUATE] {system.name} | K: {block['K']} | dt: {dt:g} "
                    f"| traj_err(T): {summary['final_traj_err']:.3e}")
        return outputs + ['summary.json']

    @staticmethod
    def step(flow_map, dt):
        if flow_map.kind == 'fixed':
            return flow_map.T0
        if dt is not None:
            return dt
        if flow_map.kind == 't0_centered':
            return flow_map.T0
        return flow_map.window

    def sections(self, config, flow_map, system, u0, dt, eps, out_dir, summary):
        block = config['evaluate']
        times = dt * np.arange(block['K'] + 1)
        learned = np.concatenate([u0[None], rollout_compose(flow_map, u0, dt, block['K'], eps)])
        exact = np.concatenate([u0[None], reference_rollout(system, u0, dt, block['K'], eps, block['reference_tol'])])
        section = poincare_section((times, learned), direction=block['section_direction'])
        reference = poincare_section((times, exact), direction=block['section_direction'])
        try:
            summary['section_mismatch'] = section_mismatch(section, reference)
        except UndefinedMetric as exc:
            summary['section_mismatch'] = None
            logger.info(f"[EVALUATE] section mismatch skipped | {exc.detail}")
        return [self.export(section, out_dir, 'section', config),
                self.export(reference, out_dir, 'section_reference', config)]
