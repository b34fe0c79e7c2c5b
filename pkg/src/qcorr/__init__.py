"""qcorr: twin-beam quantum correlation recovery toolkit.

Simulates two-mode squeezed twin-beam photocurrent traces, disrupts one beam
with a scatterer model, reconstructs it with a three-block LSTM trained from
scratch, and quantifies the recovery via histogram mutual information and
intensity-difference squeezing spectra.
"""

from .trace import (DigitizationSpec, LengthMismatchError, MalformedHeaderError,
                    Trace, TraceFormatError, TraceSet, UnknownMagicError, digitize,
                    digitize_trace, load_trace, save_trace, validate_traceset)
from .twinbeam import (DEFAULT_SCATTERER, ScattererParams, SqueezedPairParams,
                       apply_scatterer, generate_sql_reference, generate_twin_beams)
from .dsp import (BandSpec, Spectrum, WelchParams, band_average_squeezing,
                  bandpass_filter, estimate_psd, intensity_difference_spectrum,
                  save_spectrum_csv, squeezing_recovery_fraction)
from .infometrics import (JointHistogram, MICurve, MIPeak, joint_histogram,
                          mi_recovery_fraction, mi_timeshift_scan,
                          mutual_information, peak_metrics, save_mi_curve_csv)
from .neural import (LinearHead, LSTMBlock, LSTMState, RecoveryModel,
                     SingleStreamModel, combine_hidden, head_forward,
                     init_recovery_model, init_single_model, load_checkpoint,
                     lstm_forward, lstm_step, model_backward, model_forward,
                     save_checkpoint, zero_state)
from .training import (AdamState, Hyperparams, NormParams, SplitSpec,
                       TrainingDiverged, TrainingReport, WindowDataset, adam_step,
                       batch_iter, mae_loss, make_windows, mse_loss, normalize,
                       reconstruct, run_single_stream_training, run_training,
                       split_dataset, window_count)
from .evaluation import (HARDWARE_BASELINE, RecoveryReport, VerificationResult,
                         evaluate_recovery, load_report, save_report,
                         verify_single_stream)

__version__ = "0.1.0"
