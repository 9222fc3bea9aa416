import logging

from hamflow.config import build_flowmap, build_scheme, build_system, draw_inputs, resolve_eps, resolve_workers
from hamflow.evalharness import FlowMapSolver, SchemeSolver, benchmark
from hamflow.handlers import HamflowCommand

logger = logging.getLogger('hamflow.runs')


class Command(HamflowCommand):
    help = 'Times the configured solvers on one batch over horizon·T_s and scores them against the reference flow.'
    subcommand = 'bench'

    def run(self, config, out_dir):
        system = build_system(config)
        block = config['bench']
        eps = resolve_eps(system, block['eps'])
        u_batch, _ = draw_inputs(config, system, block['batch'], seed_offset=3)

        solvers = []
        for entry in block['solvers'] or [{'type': 'scheme', 'name': None, 'h': None, 'dt': None}]:
            if entry['type'] == 'scheme':
                solvers.append(SchemeSolver(build_scheme(config, system, entry['name'], entry['h']), eps))
            else:
                solvers.append(FlowMapSolver(build_flowmap(config, system), entry['dt'], eps))

        reports = benchmark(solvers, system, u_batch, block['T_s'], block['repeats'], block['horizon'], eps,
                            resolve_workers(config), record_timing=config['run']['record_timing'])
        logger.info(f"[BENCH] solvers: {len(reports)} | batch: {block['batch']} | T: {block['T_s'] * block['horizon']:g}")
        return [self.export(reports, out_dir, 'bench', config)]
