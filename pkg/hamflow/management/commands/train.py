import logging

from hamflow.config import (
    build_collocation, build_flowmap, build_norm, build_optimizer, build_samples, build_scheme, build_system,
    draw_inputs, resolve_workers,
)
from hamflow.flowmap import save_flowmap
from hamflow.handlers import HamflowCommand
from hamflow.losses import DataObjective, JointObjective, ResidualObjective, build_dataset, train

logger = logging.getLogger('hamflow.runs')


class Command(HamflowCommand):
    help = 'Trains a flow map on the configured objective; writes checkpoint.npz and the loss table.'
    subcommand = 'train'

    def run(self, config, out_dir):
        system = build_system(config)
        scheme = build_scheme(config, system)
        flow_map = build_flowmap(config, system)
        norm = build_norm(config, system)
        loss, run = config['loss'], config['run']
        seed = run['seed']

        samples = None
        if loss['collocation']['phase_mode'] == 'samples':
            samples = build_samples(config, system, resolve_workers(config)).coords

        objective = self.objective(config, system, scheme, flow_map, norm, samples)
        path = out_dir / 'checkpoint.npz'

        def checkpoint(iteration):
            save_flowmap(flow_map, path, {'iteration': iteration, 'loss': loss['type']})
            return iteration

        record = train(objective, flow_map.params, build_optimizer(config), run['iterations'],
                       run['eval_every'], seed, checkpoint, run['record_timing'])
        if not record.checkpoints:
            checkpoint(0)
        logger.info(f"[TRAIN] {loss['type']} | params: {flow_map.params.count} | iterations: {record.iterations} "
                    f"| final_loss: {record.final_loss}")
        return ['checkpoint.npz', self.export(record, out_dir, 'loss', config)]

    @staticmethod
    def objective(config, system, scheme, flow_map, norm, samples):
        loss, seed = config['loss'], config['run']['seed']
        colloc = build_collocation(config, system, samples=samples)
        if loss['type'] in ('residual', 'exact'):
            return ResidualObjective(flow_map, scheme, system, colloc, norm, seed, exact=loss['type'] == 'exact',
                                     schedule=loss['schedule'], test_fraction=loss['test_fraction'])

        inputs, eps = draw_inputs(config, system, loss['dataset']['size'], seed_offset=1, samples=samples)
        dataset = build_dataset(system, inputs, config['model']['T0'], loss['horizon_steps'],
                                loss['dataset']['tol'], eps)
        S, batch_size = loss['horizon_steps'], loss['dataset']['batch_size']
        if loss['type'] == 'data':
            return DataObjective(flow_map, dataset, S, norm, batch_size, seed, loss['test_fraction'])
        return JointObjective(flow_map.fixed, flow_map.variable, scheme, system, dataset, colloc, norm, S,
                              batch_size, seed, loss['test_fraction'])
