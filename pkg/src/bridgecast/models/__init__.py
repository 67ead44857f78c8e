from bridgecast.models.deterministic import DeterministicBranch, db_loss
from bridgecast.models.denoiser import VideoDenoiser

__all__ = ["DeterministicBranch", "VideoDenoiser", "db_loss"]
