"""Exception hierarchy shared by the pipeline.

The CLI maps :class:`DivergenceError` to exit code 3 and every other
:class:`FundusNetError` to exit code 2.
"""


class FundusNetError(Exception):
    """Base class for all errors raised by fundusnet."""


class ConfigError(FundusNetError, ValueError):
    """Invalid configuration value or combination."""


class DatasetError(FundusNetError):
    """Dataset root or class folder is missing or unusable."""


class ImageLoadError(FundusNetError):
    def __init__(self, path, reason):
        super().__init__(f"cannot load image {path}: {reason}")
        self.path = path


class ShapeError(FundusNetError, ValueError):
    """Input tensor does not match the model's expected dimensions."""


class RegistryError(FundusNetError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class IntegrityError(FundusNetError):
    """Downloaded or cached weights failed checksum verification."""


class FetchError(FundusNetError):
    """Pretrained weights could not be downloaded."""


class TopologyError(FundusNetError):
    """Checkpoint and configuration describe different model topologies."""


class DivergenceError(FundusNetError):
    def __init__(self, epoch, batch, loss):
        super().__init__(
            f"non-finite training loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
