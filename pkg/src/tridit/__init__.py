"""tridit: a three-branch toy diffusion transformer with plug-and-play
consistency and style adapters, read-only conditioning, condition token
mapping, per-run feature reuse, and two-stage rolling-bank training."""

from .bank import (
    RollingSchedule,
    StyleBank,
    StyleBankEntry,
    active_entry,
    build_bank,
    hot_swap,
    load_bank_manifest,
    write_bank_manifest,
)
from .bench import OverheadReport, measure_overhead
from .conditioning import (
    AttentionMaskSpec,
    ConditionCache,
    ConditionGeometry,
    READ_ONLY_MASK,
    build_mask,
    cache_or_compute,
    invalidate,
    map_condition_positions,
)
from .data import (
    Manifest,
    PairedSample,
    STYLE_TRANSFORMS,
    load_manifest,
    save_manifest,
    split,
    synth_pairs,
)
from .errors import (
    BankLoadError,
    ConfigurationError,
    InvalidInputError,
    JudgeProtocolError,
    KindMismatchError,
    ManifestError,
    SlotOccupiedError,
    TriDiTError,
)
from .evaluation import (
    BenchmarkReport,
    EvalAdapters,
    ToyEmbedder,
    content_consistency,
    default_embedder,
    run_benchmark,
    structure_embedder,
    style_consistency,
    style_embedder,
)
from .judge import (
    CannedJudgeTransport,
    HttpJudgeTransport,
    JUDGE_PROMPT_TEMPLATE,
    JUDGE_RESPONSE_EXAMPLE,
    JudgeRequest,
    JudgeVerdict,
    ScoreBlock,
    build_judge_prompt,
    create_judge_app,
    judge_sample,
    parse_judge_response,
)
from .lora import (
    AdapterCheckpoint,
    AdapterKind,
    LoRAAdapter,
    apply_condition_deltas,
    apply_main_deltas,
    attach,
    detach,
    init_adapter,
)
from .model import (
    DiffusionState,
    ModelConfig,
    TriBranchDiT,
    build_model,
    flow_matching_loss,
    joint_attention,
)
from .sampling import GenerateResult, SampleConfig, euler_step, generate
from .tokens import BranchTag, TokenSequence, concat_branches, patchify, tokenize, unpatchify
from .training import (
    TrainConfig,
    TrainReport,
    TrainResult,
    TrainStage,
    train_consistency_stage,
    train_style_stage,
)

__version__ = "0.1.0"
