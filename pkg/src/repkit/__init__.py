"""Few-shot exercise repetition counting from 9-channel IMU streams."""

__version__ = "0.1.0"
