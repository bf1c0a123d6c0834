"""Link-level simulator for adaptive multi-stream JSCC over MIMO fading channels.

Subpackages / modules:

* :mod:`mimojscc.channel`  -- correlated MIMO fading, zero-forcing detection, CQI
* :mod:`mimojscc.entropy`  -- discretized Gaussian / logistic entropy models
* :mod:`mimojscc.asm`      -- adaptive spatial multiplexing (rate allocation,
  stream mapping, bandwidth accounting)
* :mod:`mimojscc.codec`    -- small MLP codec with manual forward/backward passes
* :mod:`mimojscc.training` -- rate-distortion training loop (Adam, gradient checks)
* :mod:`mimojscc.harness`  -- experiment configs, end-to-end link, sweeps
* :mod:`mimojscc.metrics`  -- PSNR and MS-SSIM
"""

__version__ = "0.1.0"
