"""beamweaver: multi-cell MU-MIMO beam management simulation and
differentiable codebook optimization."""

__version__ = "0.1.0"

from . import autodiff, beam_mgmt, channel, codebook, errors, link, nbl

__all__ = ["autodiff", "beam_mgmt", "channel", "codebook", "errors", "link",
           "nbl", "__version__"]
