"""
Run config yükleme: YAML presets, dotted overrides and builders that turn a
validated config tree into library objects.

    load_config('npco', ['model.width=64', 'run.iterations=20000'])
"""
import hashlib
import json
from pathlib import Path

import numpy as np
import yaml
from django.conf import settings
from django.core.serializers.json import DjangoJSONEncoder
from rest_framework import serializers

from .evalharness import read_results
from .flowmap import FixedStepFlowMap, T0CenteredFlowMap, TaylorFlowMap, load_flowmap
from .hamiltonians import FermiPastaUlam, make_system
from .integrators import make_scheme
from .losses import CollocationSpec, NormSpec, OptimizerConfig, draw_phase_points
from .mcsampler import McSamplerConfig, SampleSet, narrowband_dataset


# --- YÜKLEME ---

def resolve_config_path(value):
    """A bare preset name resolves to PRESET_DIR/<name>.yml; anything else is a path."""
    candidate = Path(value)
    if candidate.suffix in ('.yml', '.yaml') or candidate.parent != Path('.'):
        return candidate
    return Path(settings.HAMFLOW['PRESET_DIR']) / f"{value}.yml"


def load_config(value, overrides=()):
    path = resolve_config_path(value)
    if not path.exists():
        raise serializers.ValidationError({'config': f"config file not found: {path}"})
    try:
        tree = yaml.safe_load(path.read_text(encoding='utf-8'))
    except yaml.YAMLError as exc:
        raise serializers.ValidationError({'config': f"{path} is not valid YAML: {exc}"})
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise serializers.ValidationError({'config': f"{path} must contain a mapping at the top level"})
    return apply_overrides(tree, overrides)


def apply_overrides(tree, overrides):
    """Set ``a.b.c=value`` entries; values are parsed as YAML scalars."""
    for item in overrides or ():
        key, sep, raw = item.partition('=')
        if not sep or not key.strip():
            raise serializers.ValidationError({'override': f"expected dotted.path=value, got '{item}'"})
        try:
            value = yaml.safe_load(raw) if raw.strip() else None
        except yaml.YAMLError:
            raise serializers.ValidationError({'override': f"cannot parse value in '{item}'"})
        parts = key.strip().split('.')
        node = tree
        for part in parts[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            elif not isinstance(child, dict):
                raise serializers.ValidationError({'override': f"'{part}' in '{key}' is not a section"})
            node = child
        node[parts[-1]] = value
    return tree


def canonical_json(config):
    return json.dumps(config, sort_keys=True, separators=(',', ':'), cls=DjangoJSONEncoder)


def config_hash(config):
    return hashlib.sha256(canonical_json(config).encode('utf-8')).hexdigest()


def plain(config):
    """Nested OrderedDicts from the serializers -> plain dicts/lists."""
    return json.loads(canonical_json(config))


def dump_config(config, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(plain(config), sort_keys=False), encoding='utf-8')
    return path


# --- KÜTÜPHANE NESNELERİ ---

def build_system(config):
    block = config['system']
    return make_system(block['name'], block.get('params') or {})


def build_scheme(config, system, name=None, h=None):
    block = config['scheme']
    return make_scheme(name or block['name'], system, h or block['h'], block['newton_tol'], block['max_iter'])


def build_flowmap(config, system, seed=None):
    """Fresh map from the model block, or the checkpoint when one is configured."""
    model = config['model']
    if model.get('checkpoint'):
        flow_map, _ = load_flowmap(model['checkpoint'])
        return flow_map
    seed = config['run']['seed'] if seed is None else seed
    widths = tuple(model['widths'])
    if model['kind'] == 'fixed':
        return FixedStepFlowMap(system, model['T0'], widths, model['gated'], seed)
    if model['kind'] == 't0_centered':
        return T0CenteredFlowMap(system, model['T0'], widths, widths, model['order'], model['orders'],
                                 model['gated'], seed, model['window'], model['slack'])
    return TaylorFlowMap(system, model['order'], model['orders'], widths, model['gated'], seed,
                         model['speed_preserving'], model['window'], model['slack'], model['eps_range'])


def build_norm(config, system):
    block = config['loss']['norm']
    if block['mode'] == 'plain':
        return NormSpec()
    if isinstance(system, FermiPastaUlam):
        omega = block['omega'] if block['omega'] is not None else system.omega
        return NormSpec.for_fput(system.m, omega)
    return NormSpec('energy', tuple(block['blocks']), block['omega'] if block['omega'] is not None else 1.0)


def build_collocation(config, system, samples=None, batch_size=None):
    block = config['loss']['collocation']
    return CollocationSpec(
        dim=system.size,
        time_mode=block['time_mode'],
        T=block['T'],
        N=block['N'],
        shift=block['shift'],
        T0=config['model'].get('T0'),
        times_per_point=block['times_per_point'],
        phase_mode=block['phase_mode'],
        low=tuple(block['low']),
        high=tuple(block['high']),
        radii=tuple(block['radii']) if block['radii'] else None,
        shell_index=tuple(block['shell_index']) if block['shell_index'] else None,
        samples=samples,
        batch_size=batch_size or block['batch_size'],
        resample=block['resample'],
        eps_range=tuple(block['eps_range']) if block['eps_range'] else None,
    )


def build_optimizer(config):
    run = config['run']
    return OptimizerConfig(lr=run['lr'], lr_decay=run['lr_decay'])


def build_sampler(config):
    block = config['sampler']
    return McSamplerConfig(
        H0=block['H0'], lam=block['lam'], scheme=block['scheme'], h=block['h'],
        n_samples=block['n_samples'], levels=block['levels'], band_std=block['band_std'],
        max_retries=block['max_retries'], seed=config['run']['seed'],
    )


def position_pool(config, system):
    """Uniform start positions for the sampler chains."""
    pool = config['sampler']['pool']
    rng = np.random.default_rng(config['run']['seed'])
    low = np.broadcast_to(np.asarray(pool['low'], dtype=np.float64), (system.d,))
    high = np.broadcast_to(np.asarray(pool['high'], dtype=np.float64), (system.d,))
    return rng.uniform(low, high, size=(pool['size'], system.d))


def load_samples(path):
    path = Path(path)
    if path.suffix == '.npz':
        return SampleSet.from_container(path)
    return SampleSet.from_frame(read_results(path))


def build_samples(config, system, workers=1):
    """Collocation samples: the configured file, or a fresh HMC-H0 dataset from the sampler block."""
    path = config['loss']['collocation']['samples']
    if path:
        return load_samples(path)
    return narrowband_dataset(system, position_pool(config, system), build_sampler(config), workers=workers)


def resolve_workers(config):
    workers = config['run']['workers']
    return int(workers) if workers else int(settings.HAMFLOW['DEFAULT_WORKERS'])


def resolve_eps(system, value):
    """Per-call eps for conditioned systems, falling back to the system default."""
    if not system.conditioned:
        return None
    return value if value is not None else system.params['eps']


def draw_inputs(config, system, n, seed_offset=0, samples=None):
    """n phase points (and eps, when the collocation block has a range) from the collocation distribution."""
    if samples is None and config['loss']['collocation']['phase_mode'] == 'samples':
        samples = build_samples(config, system).coords
    spec = build_collocation(config, system, samples=samples, batch_size=n)
    rng = np.random.default_rng(config['run']['seed'] + seed_offset)
    points = draw_phase_points(spec, rng, n)
    eps = None
    if spec.eps_range is not None:
        eps = rng.uniform(spec.eps_range[0], spec.eps_range[1], size=n)
    return points, eps
