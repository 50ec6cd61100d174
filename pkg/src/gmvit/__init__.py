"""Group multi-view transformer for 3D shape recognition, with distillation."""

__version__ = "0.1.0"
