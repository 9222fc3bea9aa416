"""
Process fan-out for independent jobs (sampler chains, scans, rollouts).

Results always come back in input order; ``workers=1`` runs inline and is
the deterministic mode.
"""
import logging
import os
import signal
from multiprocessing import Pool

logger = logging.getLogger('hamflow.runs')


def default_workers():
    try:
        from django.conf import settings
        if settings.configured:
            return int(settings.HAMFLOW['DEFAULT_WORKERS'])
    except (ImportError, KeyError, AttributeError):
        pass
    return os.cpu_count() or 1


def _ignore_sigint():
    # Ctrl-C is handled once, in the parent
    signal.signal(signal.SIGINT, signal.SIG_IGN)


def parallel_map(fn, items, workers=None):
    """
    [fn(*args) for args in items] across ``workers`` processes.

    ``fn`` must be a module-level function and every item a tuple of
    picklable arguments.
    """
    items = list(items)
    workers = default_workers() if workers is None else int(workers)
    if workers <= 1 or len(items) <= 1:
        return [fn(*args) for args in items]
    workers = min(workers, len(items))
    logger.info(f"[WORKERS] {fn.__name__} | jobs: {len(items)} | workers: {workers}")
    with Pool(workers, _ignore_sigint) as pool:
        try:
            return pool.starmap(fn, items)
        except KeyboardInterrupt:
            pool.terminate()
            pool.join()
            raise
