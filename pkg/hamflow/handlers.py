import json
import logging
import platform
import time
import traceback
from pathlib import Path

import django
import numpy as np
import pandas as pd
import scipy
from django.conf import settings
from django.core.management.base import BaseCommand, CommandError
from django.core.serializers.json import DjangoJSONEncoder
from django.utils import timezone
from rest_framework.exceptions import ValidationError

from . import __version__
from .config import config_hash, dump_config, load_config, plain
from .evalharness import export_results
from .exceptions import HamflowError
from .models import ExperimentRun
from .serializers import ExperimentRunSerializer, RunConfigSerializer

logger = logging.getLogger('hamflow.runs')
error_logger = logging.getLogger('hamflow.errors')

CONFIG_ERROR_EXIT = 2
RUNTIME_ERROR_EXIT = 1


# ---------------------------------------------------------------------------
# 1. Hata yükü
#    Her hatayı tek tip JSON yapısına çevirir:
#
#    {
#        "success": false,
#        "error":   "Configuration Error",
#        "detail":  {...},
#        "status_code": 2
#    }
# ---------------------------------------------------------------------------

def error_payload(exc):
    if isinstance(exc, ValidationError):
        return {
            'success': False,
            'error': 'Configuration Error',
            'detail': exc.detail,
            'status_code': CONFIG_ERROR_EXIT,
        }
    if isinstance(exc, HamflowError):
        return exc.payload()

    error_logger.critical(f"[UNHANDLED] {exc.__class__.__name__}: {exc}\n{traceback.format_exc()}")
    return {
        'success': False,
        'error': 'Runtime Error',
        'detail': f"{exc.__class__.__name__}: {exc}",
        'status_code': RUNTIME_ERROR_EXIT,
    }


def to_json(data):
    return json.dumps(data, indent=2, ensure_ascii=False, cls=DjangoJSONEncoder)


def package_versions():
    return {
        'python': platform.python_version(),
        'numpy': np.__version__,
        'scipy': scipy.__version__,
        'pandas': pd.__version__,
        'django': django.get_version(),
        'hamflow': __version__,
    }


def output_root():
    return Path(settings.HAMFLOW['OUTPUT_ROOT'])


# ---------------------------------------------------------------------------
# 2. Komut tabanı
#    Config yükle → doğrula → çıktı klasörü → run() → manifest + kayıt
# ---------------------------------------------------------------------------

class HamflowCommand(BaseCommand):
    """
    Base for the run subcommands. Subclasses set ``subcommand`` and implement
    ``run(config, out_dir) -> list of written file names``.

    Exit codes: 0 success, 1 runtime failure, 2 configuration error.
    """

    subcommand = None

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True,
                            help="Preset name (presets/<name>.yml) or path to a YAML run config.")
        parser.add_argument('--override', nargs='*', action='extend', default=[], metavar='a.b=value',
                            help='Dotted-path overrides, values parsed as YAML scalars.')
        parser.add_argument('--out', default=None,
                            help='Output directory (default: run.output_dir or $HAMFLOW_OUT/<subcommand>-<hash>).')

    def handle(self, *args, **options):
        started = time.perf_counter()
        record = None
        out_dir = None
        try:
            raw = load_config(options['config'], options['override'])
            serializer = RunConfigSerializer(data=raw, context={'subcommand': self.subcommand})
            serializer.is_valid(raise_exception=True)
            config = plain(serializer.validated_data)
            digest = config_hash(config)
            seed = config['run']['seed']
            out_dir = Path(options['out'] or config['run']['output_dir']
                           or output_root() / f"{self.subcommand}-{digest[:12]}")
            out_dir.mkdir(parents=True, exist_ok=True)
            record = ExperimentRun.objects.create(
                subcommand=self.subcommand, config_hash=digest, seed=seed, output_dir=str(out_dir))
            logger.info(f"[RUN] {self.subcommand} #{record.id} başladı | config: {digest[:12]} | seed: {seed}")

            dump_config(config, out_dir / 'config.yml')
            outputs = list(self.run(config, out_dir) or [])

            record.status = 'succeeded'
            record.exit_code = 0
            record.finished_at = timezone.now()
            record.save()
            manifest = {
                'subcommand': self.subcommand,
                'config': config,
                'config_hash': digest,
                'seed': seed,
                'versions': package_versions(),
                'outputs': ['config.yml'] + outputs,
                'run': ExperimentRunSerializer(record).data,
            }
            (out_dir / 'manifest.json').write_text(to_json(manifest), encoding='utf-8')
        except Exception as exc:
            self._fail(exc, record, out_dir, started)

        elapsed = (time.perf_counter() - started) * 1000
        logger.info(f"[RUN] {self.subcommand} #{record.id} | durum: succeeded | çıkış: 0 | süre: {elapsed:.1f}ms")
        self.stdout.write(self.style.SUCCESS(f"{self.subcommand} tamamlandı → {out_dir}"))

    def _fail(self, exc, record, out_dir, started):
        payload = error_payload(exc)
        code = payload['status_code']
        text = to_json(payload)
        if out_dir is not None and out_dir.exists():
            (out_dir / 'error.json').write_text(text, encoding='utf-8')
        if record is None:
            record = ExperimentRun(subcommand=self.subcommand, config_hash='', output_dir=str(out_dir or ''))
        record.status = 'failed'
        record.exit_code = code
        record.error = json.loads(text)
        record.finished_at = timezone.now()
        record.save()

        elapsed = (time.perf_counter() - started) * 1000
        error_logger.warning(f"[RUN] {self.subcommand} #{record.id} | durum: failed | çıkış: {code} "
                             f"| {payload['error']} | süre: {elapsed:.1f}ms")
        self.stderr.write(text)
        raise CommandError(text, returncode=code) from exc

    def export(self, record, out_dir, stem, config):
        """Write one result table in the run's format; returns the file name."""
        fmt = config['run']['format']
        path = export_results(record, Path(out_dir) / f"{stem}.{fmt}", fmt, settings.HAMFLOW['CSV_FLOAT_FORMAT'])
        return path.name

    def run(self, config, out_dir):
        raise NotImplementedError('subclasses of HamflowCommand must provide a run() method')
