import logging

from hamflow.config import build_sampler, build_system, position_pool, resolve_workers
from hamflow.handlers import HamflowCommand
from hamflow.mcsampler import narrowband_dataset

logger = logging.getLogger('hamflow.runs')


class Command(HamflowCommand):
    help = 'Draws an HMC-H0 narrowband dataset from the sampler block (CSV plus .npz container).'
    subcommand = 'sample'

    def run(self, config, out_dir):
        system = build_system(config)
        sampler = build_sampler(config)
        samples = narrowband_dataset(system, position_pool(config, system), sampler, workers=resolve_workers(config))
        samples.save(out_dir / 'samples.npz')
        logger.info(f"[SAMPLE] {system.name} | samples: {len(samples)} | levels: {len(samples.meta['levels'])} "
                    f"| H0: {sampler.H0:g} | lambda: {sampler.lam:g}")
        return [self.export(samples, out_dir, 'samples', config), 'samples.npz']
