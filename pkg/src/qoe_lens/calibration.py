"""Calibration constants for the synthetic session generator.

Every tunable lives here so the generator can be re-fit in one place.
Anchors held during fitting:
  - mean video packet size ~1052 bytes at 250 kBps, packets under 700 bytes
    confined to very low bandwidth;
  - >= ~80% of slot size-means inside [900, 1150] bytes over a mixed corpus;
  - packet count linear in utilized bandwidth (r >= 0.99 by construction);
  - corpus PIQE-rating marginals near Good 52% / Fair 37% / Poor 11%, with
    packet-loss sessions staying in the Good band;
  - target frame rates 20 FPS at >= 125 kBps, 15 FPS below.
"""

from __future__ import annotations

import math

# mean video packet size (bytes) as a function of utilized bandwidth (kBps):
# logarithmic fit SIZE_LOG_A + SIZE_LOG_B * ln(bw), clamped
SIZE_LOG_A = 500.0
SIZE_LOG_B = 100.0
SIZE_MEAN_MIN = 300.0
SIZE_MEAN_MAX = 1150.0

VIDEO_SIZE_STD = 60.0
VIDEO_SIZE_CLAMP = (300, 1200)

AUDIO_PKTS_PER_SEC = 50
AUDIO_SIZE_MEAN = 187.0
AUDIO_SIZE_STD = 25.0
AUDIO_SIZE_CLAMP = (100, 270)

# frame-rate model
FPS_TARGET_HIGH = 20.0       # at >= FPS_HIGH_BW_KBPS utilized bandwidth
FPS_TARGET_LOW = 15.0
FPS_HIGH_BW_KBPS = 125.0
FPS_NOISE_STD = 0.8
FPS_NOISE_WIDEN_PER_LOSS_PCT = 0.15   # multiplicative widening per loss %
FPS_FREEZE_MEAN_PER_LOSS_PCT = 0.4    # Exp-mean decode penalty per loss %
FPS_MIN = 1.0
FPS_MAX = 30.0

# spatial quality: PIQE center interpolated over ln(bandwidth)
PIQE_BW_ANCHORS_KBPS = (10.0, 15.0, 30.0, 60.0, 125.0, 250.0)
PIQE_CENTER_ANCHORS = (58.0, 55.0, 45.5, 43.0, 40.0, 24.0)
PIQE_STD = 2.5
# packet-loss sessions keep stable spatial quality in the Good band
PIQE_LOSS_CONDITION_CENTER = 27.0

# BRISQUE tracks PIQE affinely with its own jitter
BRISQUE_OFFSET = 21.0
BRISQUE_SLOPE = 1.0
BRISQUE_STD = 2.0

# packet timing
BURST_INTRA_GAP_S = 0.0002    # spacing of packets inside one frame burst
BURST_JITTER_FRAC = 0.3       # burst center jitter as a fraction of 1/fps

# recovery model for lost packets (not derived from measurements)
RETX_FRACTION = 0.5
RETX_DELAY_RANGE_S = (0.030, 0.080)

# bandwidth profiles
LIMIT_NOISE_FRAC = 0.05           # +-5% multiplicative noise on limits
DROP_WINDOW_S = 10
DROP_RECOVERY_FIRST_KBPS_PER_S = 40.0
DROP_RECOVERY_LATER_KBPS_PER_S = 10.0

# default corpus composition (107 sessions total); the heavier weight on
# bandwidth limits is what pushes the PIQE marginals onto their targets
CORPUS_LIMIT_SESSIONS_PER_LEVEL = 11   # x5 levels = 55
CORPUS_DROP_SESSIONS = 27
CORPUS_LOSS_SESSIONS_PER_LEVEL = 5     # x5 levels = 25

RTP_VIDEO_CLOCK_HZ = 90_000
RTP_AUDIO_CLOCK_HZ = 48_000


def mean_video_size(bw_kbps: float) -> float:
    """Expected video packet size in bytes at a utilized bandwidth."""
    if bw_kbps <= 0:
        raise ValueError(f"bandwidth must be > 0, got {bw_kbps}")
    raw = SIZE_LOG_A + SIZE_LOG_B * math.log(bw_kbps)
    return min(max(raw, SIZE_MEAN_MIN), SIZE_MEAN_MAX)


def piqe_center(bw_kbps: float) -> float:
    """PIQE tier center for a utilized bandwidth (log-linear interpolation,
    flat beyond the anchor range)."""
    x = math.log(bw_kbps)
    xs = [math.log(a) for a in PIQE_BW_ANCHORS_KBPS]
    if x <= xs[0]:
        return PIQE_CENTER_ANCHORS[0]
    if x >= xs[-1]:
        return PIQE_CENTER_ANCHORS[-1]
    for i in range(1, len(xs)):
        if x <= xs[i]:
            frac = (x - xs[i - 1]) / (xs[i] - xs[i - 1])
            lo, hi = PIQE_CENTER_ANCHORS[i - 1], PIQE_CENTER_ANCHORS[i]
            return lo + frac * (hi - lo)
    return PIQE_CENTER_ANCHORS[-1]
