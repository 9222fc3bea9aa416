from django.apps import AppConfig
from django.conf import settings
from django.core import checks


class HamflowConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "hamflow"

    def ready(self):
        checks.register(check_hamflow_settings)


def check_hamflow_settings(app_configs=None, **kwargs):
    """settings.HAMFLOW must agree with the container format this build reads."""
    from .containers import FORMAT_VERSION

    errors = []
    config = getattr(settings, 'HAMFLOW', None)
    if config is None:
        return [checks.Error('settings.HAMFLOW is missing', id='hamflow.E001')]
    if config.get('CHECKPOINT_FORMAT_VERSION') != FORMAT_VERSION:
        errors.append(checks.Error(
            f"CHECKPOINT_FORMAT_VERSION={config.get('CHECKPOINT_FORMAT_VERSION')} but this build reads "
            f"version {FORMAT_VERSION}",
            id='hamflow.E002',
        ))
    if int(config.get('DEFAULT_WORKERS', 1)) < 1:
        errors.append(checks.Error('DEFAULT_WORKERS must be >= 1', id='hamflow.E003'))
    return errors
