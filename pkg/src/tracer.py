import os

import mlflow


IS_LOGABLE = False


class _Controller:
    def __init__(self, func):
        self._func = func

    def __call__(self, *args, **kwargs):
        if IS_LOGABLE:
            return self._func(*args, **kwargs)
        else:
            return


def enable(tracking_dir):
    """Send runs to a local file store under `tracking_dir`."""
    global IS_LOGABLE
    os.makedirs(tracking_dir, exist_ok=True)
    mlflow.set_tracking_uri('file:{}'.format(os.path.abspath(tracking_dir)))
    IS_LOGABLE = True


def disable():
    global IS_LOGABLE
    IS_LOGABLE = False


@_Controller
def start_trace(job_name=None):
    if job_name is not None:
        mlflow.set_experiment(job_name)
    mlflow.start_run()


@_Controller
def end_trace():
    mlflow.end_run()


@_Controller
def log_param(key, val):
    mlflow.log_param(key, val)


@_Controller
def log_params(params, prefix=''):
    for key, val in params.items():
        if isinstance(val, dict):
            log_params(val, prefix='{}{}.'.format(prefix, key))
        else:
            log_param('{}{}'.format(prefix, key), val)


@_Controller
def log_metric(key, val, step=None):
    mlflow.log_metric(key, val, step=step)


@_Controller
def log_artifact(fname):
    mlflow.log_artifact(fname)
