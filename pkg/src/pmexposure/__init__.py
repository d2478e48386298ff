"""Weekly PM2.5 estimation from satellite rasters and child-exposure mapping."""

__version__ = "0.1.0"
