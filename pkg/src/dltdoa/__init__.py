"""Channel-aware adaptive UWB DL-TDOA localization.

Simulator and library for a power-efficient downlink TDOA pipeline: CNN NLOS
probability prediction from channel impulse responses, dynamic ranging
frequency, healthy-message selection, IMU motion gating, least-squares
multilateration and an LSTM localization predictor fed with augmented TDOA.
"""

__version__ = "0.1.0"

SPEED_OF_LIGHT = 299_792_458.0  # m/s
GRAVITY = 9.80665  # m/s^2
TICK_S = 0.0625  # 16 Hz IMU / pipeline tick
USER_HEIGHT_M = 1.2
