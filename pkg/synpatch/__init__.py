from . import das, datagen, errors, intervention, metrics, sweep, tensor, transformer, utils
from .utils import __version__
