from pathlib import Path

from rest_framework import serializers

from .exceptions import HamflowError
from .hamiltonians import SYSTEM_CLASSES, FermiPastaUlam, make_system
from .integrators import SCHEMES
from .losses import PHASE_MODES, TIME_MODES
from .models import ExperimentRun

SCHEME_CHOICES = sorted(SCHEMES)
DEFAULT_WIDTHS = [128, 128, 128, 128]


class BoundsField(serializers.ListField):
    """A number or a list of numbers (broadcast per coordinate later)."""

    child = serializers.FloatField()

    def to_internal_value(self, data):
        if isinstance(data, (int, float)) and not isinstance(data, bool):
            data = [data]
        return super().to_internal_value(data)


class ShiftField(serializers.Field):
    """Grid shift τ: a number, or 'uniform' to draw τ ~ U[0, h) per batch."""

    def to_internal_value(self, data):
        if data == 'uniform':
            return data
        try:
            value = float(data)
        except (TypeError, ValueError):
            raise serializers.ValidationError("Sayı ya da 'uniform' olmalı.")
        if value < 0:
            raise serializers.ValidationError('Kaydırma negatif olamaz.')
        return value

    def to_representation(self, value):
        return value


class BlockSerializer(serializers.Serializer):
    """Missing nested blocks validate as empty mappings so their defaults apply."""

    nested_blocks = ()

    def to_internal_value(self, data):
        if isinstance(data, dict):
            data = {**{name: {} for name in self.nested_blocks}, **data}
            for name in self.nested_blocks:
                if data[name] is None and not self.fields[name].allow_null:
                    data[name] = {}
        return super().to_internal_value(data)


def _positive(value, name):
    if value is not None and not value > 0:
        raise serializers.ValidationError(f"{name} pozitif olmalı.")
    return value


def _existing(path, name):
    if path and not Path(path).exists():
        raise serializers.ValidationError({name: f"Dosya bulunamadı: {path}"})


# --- SİSTEM VE ŞEMA İÇİN ---

class SystemSerializer(serializers.Serializer):
    name = serializers.ChoiceField(choices=sorted(SYSTEM_CLASSES))
    params = serializers.DictField(required=False, default=dict)


class SchemeSerializer(serializers.Serializer):
    name = serializers.ChoiceField(choices=SCHEME_CHOICES, default='velocity_verlet')
    h = serializers.FloatField(default=0.01)
    newton_tol = serializers.FloatField(default=1e-12)
    max_iter = serializers.IntegerField(min_value=1, default=50)

    def validate_h(self, value):
        return _positive(value, 'h')


# --- MODEL İÇİN ---

class ModelBlockSerializer(serializers.Serializer):
    kind = serializers.ChoiceField(choices=['fixed', 'variable', 't0_centered'], default='variable')
    T0 = serializers.FloatField(allow_null=True, default=None)
    order = serializers.IntegerField(min_value=0, max_value=2, default=2)
    orders = serializers.ListField(child=serializers.IntegerField(min_value=0, max_value=2), min_length=2,
                                   max_length=2, allow_null=True, default=None)
    widths = serializers.ListField(child=serializers.IntegerField(min_value=1), min_length=1,
                                   default=lambda: list(DEFAULT_WIDTHS))
    width = serializers.IntegerField(min_value=1, allow_null=True, default=None)
    depth = serializers.IntegerField(min_value=1, allow_null=True, default=None)
    gated = serializers.BooleanField(default=True)
    speed_preserving = serializers.BooleanField(default=False)
    window = serializers.FloatField(default=1.0)
    slack = serializers.FloatField(min_value=0.0, default=0.1)
    eps_range = serializers.ListField(child=serializers.FloatField(min_value=0.0), min_length=2, max_length=2,
                                      allow_null=True, default=None)
    checkpoint = serializers.CharField(allow_null=True, allow_blank=True, default=None)

    def validate_window(self, value):
        return _positive(value, 'window')

    def validate(self, data):
        # model.width / model.depth overrides rewrite the hidden widths
        if data['width'] is not None or data['depth'] is not None:
            width = data['width'] or data['widths'][0]
            depth = data['depth'] or len(data['widths'])
            data['widths'] = [width] * depth
        if data['kind'] in ('fixed', 't0_centered') and not (data['T0'] or 0) > 0:
            raise serializers.ValidationError({'T0': f"{data['kind']} haritası için T0 > 0 gerekli."})
        if data['eps_range'] and data['eps_range'][0] > data['eps_range'][1]:
            raise serializers.ValidationError({'eps_range': 'Alt sınır üst sınırdan büyük olamaz.'})
        return data


# --- KAYIP FONKSİYONU İÇİN ---

class NormSerializer(serializers.Serializer):
    mode = serializers.ChoiceField(choices=['plain', 'energy'], default='plain')
    omega = serializers.FloatField(allow_null=True, default=None)
    blocks = serializers.ListField(child=serializers.IntegerField(min_value=0), min_length=2, max_length=2,
                                   allow_null=True, default=None)

    def validate_omega(self, value):
        return _positive(value, 'omega')


class CollocationSerializer(serializers.Serializer):
    time_mode = serializers.ChoiceField(choices=TIME_MODES, default='grid')
    T = serializers.FloatField(default=10.0)
    N = serializers.IntegerField(min_value=2, default=41)
    shift = ShiftField(default=0.0)
    times_per_point = serializers.IntegerField(min_value=1, default=1)
    phase_mode = serializers.ChoiceField(choices=PHASE_MODES, default='box')
    low = BoundsField(default=lambda: [-1.0])
    high = BoundsField(default=lambda: [1.0])
    radii = serializers.ListField(child=serializers.FloatField(min_value=0.0), min_length=2, max_length=2,
                                  allow_null=True, default=None)
    shell_index = serializers.ListField(child=serializers.IntegerField(min_value=0), allow_null=True, default=None)
    samples = serializers.CharField(allow_null=True, allow_blank=True, default=None)
    batch_size = serializers.IntegerField(min_value=1, default=10)
    resample = serializers.BooleanField(default=False)
    eps_range = serializers.ListField(child=serializers.FloatField(min_value=0.0), min_length=2, max_length=2,
                                      allow_null=True, default=None)

    def validate(self, data):
        if data['phase_mode'] == 'shell' and not data['radii']:
            raise serializers.ValidationError({'radii': "shell örneklemesi için radii gerekli."})
        if data['radii'] and data['radii'][0] >= data['radii'][1]:
            raise serializers.ValidationError({'radii': 'r_min < r_max olmalı.'})
        _existing(data['samples'], 'samples')
        return data


class ScheduleSerializer(serializers.Serializer):
    T_start = serializers.FloatField()
    T = serializers.FloatField()
    ramp_iterations = serializers.IntegerField(min_value=1)


class DatasetSerializer(serializers.Serializer):
    size = serializers.IntegerField(min_value=1, default=64)
    tol = serializers.FloatField(default=1e-10)
    batch_size = serializers.IntegerField(min_value=1, allow_null=True, default=None)


class LossSerializer(BlockSerializer):
    nested_blocks = ('norm', 'collocation', 'dataset')

    type = serializers.ChoiceField(choices=['residual', 'exact', 'data', 'joint'], default='residual')
    horizon_steps = serializers.IntegerField(min_value=0, default=1)
    test_fraction = serializers.FloatField(min_value=0.0, max_value=0.5, default=0.1)
    norm = NormSerializer()
    collocation = CollocationSerializer()
    schedule = ScheduleSerializer(allow_null=True, required=False, default=None)
    dataset = DatasetSerializer()


# --- ÖRNEKLEYİCİ İÇİN ---

class PoolSerializer(serializers.Serializer):
    low = BoundsField(default=lambda: [-1.0])
    high = BoundsField(default=lambda: [1.0])
    size = serializers.IntegerField(min_value=1, default=256)


class SamplerSerializer(BlockSerializer):
    nested_blocks = ('pool',)

    H0 = serializers.FloatField(default=1.0)
    lam = serializers.FloatField(default=1.0)
    scheme = serializers.ChoiceField(choices=SCHEME_CHOICES, default='velocity_verlet')
    h = serializers.FloatField(allow_null=True, default=None)
    n_samples = serializers.IntegerField(min_value=0, default=100)
    levels = serializers.IntegerField(min_value=1, default=16)
    band_std = serializers.FloatField(min_value=0.0, allow_null=True, default=None)
    max_retries = serializers.IntegerField(min_value=0, default=10)
    pool = PoolSerializer()

    def validate_lam(self, value):
        return _positive(value, 'lam')

    def validate_h(self, value):
        return _positive(value, 'h')


# --- ÇALIŞTIRMA İÇİN ---

class RunSerializer(serializers.Serializer):
    seed = serializers.IntegerField(min_value=0, default=0)
    iterations = serializers.IntegerField(min_value=0, default=1000)
    eval_every = serializers.IntegerField(min_value=1, default=1000)
    lr = serializers.FloatField(default=1e-3)
    lr_decay = serializers.FloatField(allow_null=True, default=None)
    output_dir = serializers.CharField(allow_null=True, allow_blank=True, default=None)
    workers = serializers.IntegerField(min_value=1, allow_null=True, default=None)
    record_timing = serializers.BooleanField(default=True)
    format = serializers.ChoiceField(choices=['csv', 'json'], default='csv')

    def validate_lr(self, value):
        return _positive(value, 'lr')


class SimulateSerializer(serializers.Serializer):
    u0 = serializers.ListField(child=serializers.FloatField(), allow_null=True, default=None)
    n_steps = serializers.IntegerField(min_value=0, default=100)
    eps = serializers.FloatField(min_value=0.0, allow_null=True, default=None)


class EvaluateSerializer(serializers.Serializer):
    u0 = serializers.ListField(child=serializers.ListField(child=serializers.FloatField()),
                               allow_null=True, default=None)
    n_initial = serializers.IntegerField(min_value=1, default=4)
    dt = serializers.FloatField(allow_null=True, default=None)
    K = serializers.IntegerField(min_value=1, default=10)
    eps = serializers.FloatField(min_value=0.0, allow_null=True, default=None)
    reference_tol = serializers.FloatField(default=1e-10)
    poincare = serializers.BooleanField(default=False)
    section_direction = serializers.ChoiceField(choices=['any', 'ascending', 'descending'], default='any')
    profile = serializers.BooleanField(default=False)
    profile_stride = serializers.IntegerField(min_value=1, default=1)

    def validate_dt(self, value):
        return _positive(value, 'dt')


class SolverSerializer(serializers.Serializer):
    type = serializers.ChoiceField(choices=['scheme', 'flowmap'])
    name = serializers.ChoiceField(choices=SCHEME_CHOICES, allow_null=True, default=None)
    h = serializers.FloatField(allow_null=True, default=None)
    dt = serializers.FloatField(allow_null=True, default=None)

    def validate(self, data):
        if data['type'] == 'scheme' and (data['name'] is None or not (data['h'] or 0) > 0):
            raise serializers.ValidationError('scheme çözücüsü için name ve h > 0 gerekli.')
        return data


class BenchSerializer(serializers.Serializer):
    solvers = SolverSerializer(many=True, required=False, default=list)
    batch = serializers.IntegerField(min_value=1, default=8)
    T_s = serializers.FloatField(default=1.0)
    repeats = serializers.IntegerField(min_value=1, default=3)
    horizon = serializers.IntegerField(min_value=1, default=1)
    eps = serializers.FloatField(min_value=0.0, allow_null=True, default=None)

    def validate_T_s(self, value):
        return _positive(value, 'T_s')


class VerifySerializer(serializers.Serializer):
    map = serializers.ChoiceField(choices=['model', 'iterates'], default='model')
    T = serializers.FloatField(min_value=0.0, default=1.0)
    n_states = serializers.IntegerField(min_value=1, default=4)
    eps = serializers.FloatField(min_value=0.0, allow_null=True, default=None)
    first_variation = serializers.BooleanField(default=True)
    psi_scale = serializers.FloatField(default=1e-3)
    taylor_states = serializers.IntegerField(min_value=0, default=100)


# --- ÇALIŞTIRMA KONFİGÜRASYONU ---

class RunConfigSerializer(BlockSerializer):
    """
    The whole run config. ``context['subcommand']`` switches on the
    subcommand-specific checks (checkpoint presence, separability, ...).
    """

    nested_blocks = ('scheme', 'model', 'loss', 'sampler', 'run', 'simulate', 'evaluate', 'bench', 'verify')

    system = SystemSerializer()
    scheme = SchemeSerializer()
    model = ModelBlockSerializer()
    loss = LossSerializer()
    sampler = SamplerSerializer()
    run = RunSerializer()
    simulate = SimulateSerializer()
    evaluate = EvaluateSerializer()
    bench = BenchSerializer()
    verify = VerifySerializer()

    def validate(self, data):
        subcommand = self.context.get('subcommand')
        try:
            system = make_system(data['system']['name'], data['system']['params'])
        except HamflowError as exc:
            raise serializers.ValidationError({'system': exc.detail})

        if data['scheme']['name'] == 'velocity_verlet' and not system.separable:
            raise serializers.ValidationError(
                {'scheme': f"velocity_verlet ayrılabilir bir sistem ister; {system.name} ayrılabilir değil."})

        model, loss = data['model'], data['loss']
        if model['orders'] is not None and system.partition is None:
            raise serializers.ValidationError({'model': f"orders için yavaş/hızlı bölüntü gerekli; {system.name} yok."})
        if loss['type'] in ('data', 'joint'):
            if loss['horizon_steps'] < 1:
                raise serializers.ValidationError({'loss': 'data/joint kaybı için horizon_steps >= 1 gerekli.'})
            if not (model['T0'] or 0) > 0:
                raise serializers.ValidationError({'model': 'data/joint kaybı için T0 > 0 gerekli.'})
            wanted = 'fixed' if loss['type'] == 'data' else 't0_centered'
            if model['kind'] != wanted:
                raise serializers.ValidationError({'model': f"{loss['type']} kaybı kind='{wanted}' ister."})
        self._validate_norm(loss['norm'], system)

        collocation = loss['collocation']
        if collocation['time_mode'] == 'fixed' and not (model['T0'] or 0) > 0:
            raise serializers.ValidationError({'loss': "time_mode 'fixed' için model.T0 > 0 gerekli."})
        sampled = collocation['phase_mode'] == 'samples' and not collocation['samples']
        if (subcommand == 'sample' or (subcommand == 'train' and sampled)) and not system.separable:
            raise serializers.ValidationError({'sampler': f"HMC-H0 ayrılabilir bir sistem ister; {system.name} değil."})

        _existing(model['checkpoint'], 'model')
        if subcommand == 'evaluate' and not model['checkpoint']:
            raise serializers.ValidationError({'model': 'evaluate için model.checkpoint gerekli.'})
        if subcommand == 'bench' and not model['checkpoint'] and any(
                s['type'] == 'flowmap' for s in data['bench']['solvers']):
            raise serializers.ValidationError({'model': 'flowmap çözücüsü için model.checkpoint gerekli.'})

        u0 = data['simulate']['u0']
        if subcommand == 'simulate':
            if u0 is None:
                raise serializers.ValidationError({'simulate': 'simulate için u0 gerekli.'})
            if len(u0) != system.size:
                raise serializers.ValidationError({'simulate': f"u0 {system.size} bileşenli olmalı."})
        for row in data['evaluate']['u0'] or ():
            if len(row) != system.size:
                raise serializers.ValidationError({'evaluate': f"u0 satırları {system.size} bileşenli olmalı."})
        return data

    @staticmethod
    def _validate_norm(norm, system):
        if norm['mode'] != 'energy':
            return
        if isinstance(system, FermiPastaUlam):
            if norm['blocks'] is not None and list(norm['blocks']) != [3 * system.m, system.m]:
                raise serializers.ValidationError(
                    {'loss': f"enerji normu blokları m={system.m} ile uyuşmuyor: {norm['blocks']}"})
        elif norm['blocks'] is None or sum(norm['blocks']) != system.size:
            raise serializers.ValidationError({'loss': f"enerji normu blokları toplamı {system.size} olmalı."})


# --- KAYITLAR İÇİN ---

class ExperimentRunSerializer(serializers.ModelSerializer):
    class Meta:
        model = ExperimentRun
        fields = ['id', 'subcommand', 'status', 'config_hash', 'seed', 'output_dir', 'exit_code',
                  'created_at', 'finished_at']
        read_only_fields = fields

