"""Two-stage carotid vessel wall segmentation from sparse slice annotations.

Stage one turns sparse expert slices into dense pseudo-labels (A-IPL, C-IPL,
S-RPL); stage two trains the lightweight DBF-UNet on them.
"""
from .labelprop import propagate, propagate_aipl, propagate_cipl
from .network import PAPER_SCALE_CONFIG, DBFUNet, NetConfig, build_model, param_report
from .phantom import SuiteConfig, VesselSpec, generate_case, generate_suite
from .srpl import PerturbationParams, refine_volume
from .volume import LabelVolume, Volume3D, read_volume, write_volume

__version__ = "0.1.0"

__all__ = [
    "DBFUNet", "LabelVolume", "NetConfig", "PAPER_SCALE_CONFIG", "PerturbationParams",
    "SuiteConfig", "VesselSpec", "Volume3D", "build_model", "generate_case", "generate_suite",
    "param_report", "propagate", "propagate_aipl", "propagate_cipl", "read_volume",
    "refine_volume", "write_volume",
]
