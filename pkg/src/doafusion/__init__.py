"""Sound-source localization from multiple microphone arrays at unknown positions.

Per-array SRP-PHAT front ends estimate directions of arrival on a geodesic
half-sphere grid; a fusion center time-aligns and concatenates them; and two
self-calibrating maps (PCA subspace and affine least squares) turn the
concatenated DOA vectors into room locations without knowing where the arrays
are.
"""

from .grid import (
    ArrayGeometry,
    DoaVector,
    HalfSphereGrid,
    build_halfsphere_grid,
    circular_mic_positions,
    tdoa_for_doa,
    tdoa_matrix,
)
from .fusion import (
    ActiveSetMismatchError,
    AffineMap,
    CalibrationSet,
    ConcatenatedDoa,
    MissingArrayMapper,
    NoObservationError,
    PartialProjectionWarning,
    PcaModel,
    ReferencePair,
    concat_doas,
    fit_affine,
    fit_pca,
    map_affine,
    map_from_reference,
    map_with_missing,
    pca_to_room,
    project_pca,
)
from .srp import (
    FrontendConfig,
    KalmanTracker,
    MultichannelFrame,
    SteeredPowerMap,
    TrackedDoa,
    TrackerConfig,
    average_power_map,
    bin_to_records,
    kalman_track,
    pick_peaks,
    run_frontend,
    srp_phat_power,
    stft,
)
from .simulate import (
    ArrayPose,
    DropoutPolicy,
    GroundTruthRecord,
    Scenario,
    Trajectory,
    default_paper_scenario,
    synthesize_audio,
    synthesize_audio_signal,
    synthesize_calibration,
    synthesize_doa_stream,
    true_doa,
)
from .service import (
    DoaStorage,
    JoinedRow,
    WireRecord,
    WireServer,
    format_wire_line,
    parse_wire_line,
    replay_capture,
    serve_wire,
)

__version__ = "0.1.0"
