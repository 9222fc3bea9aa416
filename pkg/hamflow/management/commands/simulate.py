import logging

from hamflow.config import build_scheme, build_system
from hamflow.evalharness import energy_exchange_profile, poincare_section
from hamflow.handlers import HamflowCommand
from hamflow.hamiltonians import AlphaParticle, FermiPastaUlam
from hamflow.integrators import integrate

logger = logging.getLogger('hamflow.runs')


class Command(HamflowCommand):
    help = 'Integrates simulate.u0 with the configured scheme and exports the trajectory.'
    subcommand = 'simulate'

    def run(self, config, out_dir):
        system = build_system(config)
        scheme = build_scheme(config, system)
        block = config['simulate']

        trajectory = integrate(system, scheme, block['u0'], n_steps=block['n_steps'], eps=block['eps'])
        outputs = [self.export(trajectory, out_dir, 'trajectory', config)]

        # sisteme özel ek çıktılar
        if isinstance(system, FermiPastaUlam):
            outputs.append(self.export(energy_exchange_profile(system, trajectory), out_dir, 'profile', config))
        elif isinstance(system, AlphaParticle):
            direction = config['evaluate']['section_direction']
            outputs.append(self.export(poincare_section(trajectory, direction=direction), out_dir, 'section', config))

        drift = abs(float(system.energy(trajectory.final, block['eps']) - system.energy(trajectory.states[0], block['eps'])))
        logger.info(f"[SIMULATE] {scheme!r} | steps: {block['n_steps']} | |ΔH|: {drift:.3e}")
        return outputs
