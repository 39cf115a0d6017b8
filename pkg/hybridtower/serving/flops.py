"""
Analytic cost accounting for the offline and online paths

Counts multiply-accumulates and reports one MAC as one FLOP, so a d-dimensional
dot product costs d FLOPs. Only matrix products are counted; norms, softmax and
activations are ignored.
"""
from dataclasses import asdict, dataclass

from hybridtower.config import ModelDims
from hybridtower.models.encoders import NUM_VIDEO_TOKENS
from hybridtower.models.hybrid_tower import GENERATOR_INPUTS
from hybridtower.utils.report import format_table

BYTES_PER_STORED_FLOAT = 4


def linear_macs(rows: int, fan_in: int, fan_out: int) -> int:
    return rows * fan_in * fan_out


def attention_macs(len_q: int, len_k: int, width: int) -> int:
    """Projections, logits, weighted sum and output projection"""
    projections = linear_macs(len_q, width, width) + 2 * linear_macs(len_k, width, width)
    mixing = 2 * len_q * len_k * width
    return projections + mixing + linear_macs(len_q, width, width)


def block_macs(length: int, width: int, mlp_ratio: int) -> int:
    hidden = width * mlp_ratio
    return attention_macs(length, length, width) + linear_macs(length, width, hidden) + linear_macs(length, hidden, width)


def _linear_params(fan_in: int, fan_out: int, bias: bool = True) -> int:
    return fan_in * fan_out + (fan_out if bias else 0)


def _block_params(width: int, mlp_ratio: int) -> int:
    hidden = width * mlp_ratio
    attention = 4 * _linear_params(width, width)
    return 4 * width + attention + _linear_params(width, hidden) + _linear_params(hidden, width)


def generator_rows(dims: ModelDims) -> int:
    """Visual tokens fed to the generator, before bos/eos"""
    sizes = {"x_v": NUM_VIDEO_TOKENS, "x_f": dims.frames, "x_ip": dims.k}
    return sum(sizes[name] for name in GENERATOR_INPUTS[dims.generator_inputs])


def parameter_count(dims: ModelDims) -> int:
    """Number of scalars in HybridTowerModel(dims)"""
    d, r = dims.width, dims.mlp_ratio
    video = (_linear_params(dims.d_in, d) + NUM_VIDEO_TOKENS * d + d + dims.patches * d + dims.frames * d
             + 2 * d + dims.video_depth * _block_params(d, r) + 2 * d + _linear_params(d, d, bias=False))
    text = (_linear_params(dims.d_in, d) + 2 * d + (dims.max_text_len + 2) * d
            + dims.text_depth * _block_params(d, r) + 2 * d + _linear_params(d, d, bias=False))
    generator = (_linear_params(d, d) + 2 * d + dims.generator_length * d
                 + dims.generator_depth * _block_params(d, r) + 2 * d + _linear_params(d, d, bias=False))
    fusioner = 4 * _linear_params(d, d) + 2 * d + max(1, dims.fc_depth) * _linear_params(d, d) + 2 * d
    return video + text + generator + fusioner + 1


@dataclass
class FlopsReport:
    """Per-video offline costs, per-query and per-pair online costs"""
    offline_video_encode_flops: int
    offline_its_flops: int
    offline_generate_flops: int
    offline_fuse_flops: int
    online_text_encode_flops: int
    online_per_matching_flops: int
    storage_bytes_per_video: int
    parameter_count: int

    @property
    def offline_total_flops(self) -> int:
        return (self.offline_video_encode_flops + self.offline_its_flops
                + self.offline_generate_flops + self.offline_fuse_flops)

    def to_dict(self) -> dict:
        result = asdict(self)
        result["offline_total_flops"] = self.offline_total_flops
        return result

    def to_table(self) -> str:
        rows = [
            ["offline video encode", format_flops(self.offline_video_encode_flops), self.offline_video_encode_flops],
            ["offline token selection", format_flops(self.offline_its_flops), self.offline_its_flops],
            ["offline pseudo-query generation", format_flops(self.offline_generate_flops), self.offline_generate_flops],
            ["offline fusion", format_flops(self.offline_fuse_flops), self.offline_fuse_flops],
            ["offline total per video", format_flops(self.offline_total_flops), self.offline_total_flops],
            ["online text encode per query", format_flops(self.online_text_encode_flops), self.online_text_encode_flops],
            ["online per video-text matching", format_flops(self.online_per_matching_flops),
             self.online_per_matching_flops],
            ["video feature storage", format_bytes(self.storage_bytes_per_video), self.storage_bytes_per_video],
            ["parameters", format_count(self.parameter_count), self.parameter_count],
        ]
        return format_table(["item", "cost", "exact"], rows)


def account_flops(dims: ModelDims) -> FlopsReport:
    """
    Analytic costs at the given dimensions

    Args:
        dims: Model shape

    Returns:
        FlopsReport
    """
    d, r = dims.width, dims.mlp_ratio
    m, n = dims.frames, dims.patches
    video_len = NUM_VIDEO_TOKENS + m + m * n

    video_encode = (linear_macs(m * n, dims.d_in, d) + dims.video_depth * block_macs(video_len, d, r)
                    + linear_macs(video_len, d, d))
    its = linear_macs(1, d, d) + linear_macs(m * n, d, d) + m * n * d

    rows = generator_rows(dims)
    generate = (linear_macs(rows, d, d) + dims.generator_depth * block_macs(rows + 2, d, r)
                + linear_macs(1, d, d))
    fuse = attention_macs(1, NUM_VIDEO_TOKENS + m, d) + max(1, dims.fc_depth) * linear_macs(1, d, d)

    text_len = dims.max_text_len
    text_encode = (linear_macs(text_len + 1, dims.d_in, d) + dims.text_depth * block_macs(text_len + 2, d, r)
                   + linear_macs(1, d, d))

    return FlopsReport(
        offline_video_encode_flops=video_encode,
        offline_its_flops=its,
        offline_generate_flops=generate,
        offline_fuse_flops=fuse,
        online_text_encode_flops=text_encode,
        online_per_matching_flops=d,
        storage_bytes_per_video=BYTES_PER_STORED_FLOAT * d,
        parameter_count=parameter_count(dims),
    )


def format_flops(value: int) -> str:
    """512 -> '0.5K', 54_900_000_000 -> '54.90G'"""
    if value < 1e6:
        return f"{value / 1e3:.1f}K"
    if value < 1e9:
        return f"{value / 1e6:.2f}M"
    return f"{value / 1e9:.2f}G"


def format_count(value: int) -> str:
    if value < 1e6:
        return f"{value / 1e3:.1f}K"
    return f"{value / 1e6:.2f}M"


def format_bytes(value: int) -> str:
    """Kilobytes of 1024 bytes: 2048 -> '2 KB'"""
    return f"{value / 1024:g} KB"
