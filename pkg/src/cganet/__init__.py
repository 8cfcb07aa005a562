"""Class-guided attention U-Net for volumetric segmentation, in numpy."""
from .autodiff import Adam, Tape, Variable, backward
from .config import RunConfig
from .network import CGAUNet, NetworkSpec, build_cga_unet
from .sam import SAMConfig, apply_sam

__version__ = "0.1.0"

__all__ = ["Adam", "Tape", "Variable", "backward", "RunConfig", "CGAUNet", "NetworkSpec",
           "build_cga_unet", "SAMConfig", "apply_sam", "__version__"]
