from .errors import CheckpointError, FormatError
from .logger import logger
import csv
import gzip
import jsonlines
import numpy as np
import os
import struct

CHECKPOINT_MAGIC = b"TOSU"
CHECKPOINT_VERSION = 1
METRICS_COLUMNS = ["epoch", "step", "phase", "l_class", "l_style", "source_acc", "target_acc"]
ABLATION_COLUMNS = [
    "variant",
    "mean_target_acc",
    "std_target_acc",
    "mean_source_acc",
    "step2_count",
    "seeds",
]


def format_cell(value):
    """Empty for missing values; ``repr`` for floats so reruns are byte-identical."""
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


class CsvWriter:
    """Writes dict rows under a fixed header; rows are flushed as they arrive."""

    def __init__(self, file_path, columns):
        self.file_path = file_path
        self.columns = list(columns)
        self.file_object = None
        self.writer = None
        logger.info(f"Writing {os.path.basename(file_path)} to {file_path}")

    def __enter__(self):
        logger.debug(f"Opening {self.file_path} for writing")
        self.file_object = open(self.file_path, "w", newline="")
        self.writer = csv.writer(self.file_object, lineterminator="\n")
        self.writer.writerow(self.columns)
        return self

    def write_row(self, row):
        self.writer.writerow([format_cell(row.get(col)) for col in self.columns])
        self.file_object.flush()

    def __exit__(self, exc_type, exc_val, exc_tb):
        logger.debug(f"Closing {self.file_path}")
        if self.file_object:
            self.file_object.close()


class MetricsWriter(CsvWriter):
    def __init__(self, file_path):
        super().__init__(file_path, METRICS_COLUMNS)


def write_json(data, file):
    with gzip.open(file, "wt") as f:
        jsonlines.Writer(f).write(data)


def read_json(file):
    with gzip.open(file, "rt") as f:
        return list(jsonlines.Reader(f))


def save_checkpoint(state, file_path):
    """
    Write named float64 arrays in the TOSU format:

        b"TOSU", u32 version, u32 count, then per tensor
        u16 name length, UTF-8 name, u8 rank, u32 extents, <f8 payload

    All integers are little-endian. Tensors are stored in name order.
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(state))]
    for name in sorted(state):
        array = np.ascontiguousarray(state[name], dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes())
    with open(file_path, "wb") as f:
        f.write(b"".join(chunks))
    logger.info(f"Saved {len(state)} tensors to {file_path}")


class _Cursor:
    def __init__(self, raw, file_path):
        self.raw = raw
        self.offset = 0
        self.file_path = file_path

    def take(self, size, what):
        if self.offset + size > len(self.raw):
            raise CheckpointError(f"{self.file_path}: truncated while reading {what}")
        chunk = self.raw[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(file_path):
    """
    Read a whole TOSU file into {name: ndarray}. Nothing is returned unless
    every tensor parsed, so a bad file never half-loads a model.
    """
    with open(file_path, "rb") as f:
        raw = f.read()
    cursor = _Cursor(raw, file_path)
    if cursor.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{file_path}: not a tosuda checkpoint (bad magic)")
    version, count = cursor.unpack("<II", "header")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{file_path}: unsupported checkpoint version {version}, "
            f"expected {CHECKPOINT_VERSION}"
        )

    state = {}
    for i in range(count):
        (name_len,) = cursor.unpack("<H", f"name length of tensor {i}")
        try:
            name = cursor.take(name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{file_path}: tensor {i} has an invalid UTF-8 name")
        (rank,) = cursor.unpack("<B", f"rank of {name}")
        shape = cursor.unpack(f"<{rank}I", f"extents of {name}")
        size = int(np.prod(shape, dtype=np.int64))
        payload = cursor.take(8 * size, f"payload of {name}")
        if name in state:
            raise CheckpointError(f"{file_path}: duplicate tensor {name}")
        state[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
        logger.debug(f"Loaded {name} {shape}")
    if cursor.offset != len(raw):
        raise CheckpointError(f"{file_path}: {len(raw) - cursor.offset} trailing bytes")
    logger.info(f"Loaded {count} tensors from {file_path}")
    return state


def to_pixel_bytes(image):
    """C×H×W floats in [0, 1] to H×W×3 uint8; one channel is replicated to RGB."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise FormatError(f"PPM needs a 1×H×W or 3×H×W image, got {image.shape}")
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    pixels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(pixels.transpose(1, 2, 0))


def write_ppm(image, file_path):
    pixels = to_pixel_bytes(image)
    height, width = pixels.shape[:2]
    with open(file_path, "wb") as f:
        f.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
    logger.debug(f"Wrote {width}×{height} PPM to {file_path}")


def _ppm_header_fields(raw, file_path):
    fields = []
    offset = 0
    while len(fields) < 4:
        while offset < len(raw) and raw[offset : offset + 1].isspace():
            offset += 1
        if raw[offset : offset + 1] == b"#":
            while offset < len(raw) and raw[offset : offset + 1] not in (b"\n", b"\r"):
                offset += 1
            continue
        start = offset
        while offset < len(raw) and not raw[offset : offset + 1].isspace():
            offset += 1
        if start == offset:
            raise FormatError(f"{file_path}: truncated PPM header")
        fields.append(raw[start:offset])
    # exactly one whitespace byte separates the header from the pixels
    return fields, offset + 1


def read_ppm(file_path):
    """Binary PPM (P6, maxval 255) as a 3×H×W float image in [0, 1]."""
    with open(file_path, "rb") as f:
        raw = f.read()
    fields, offset = _ppm_header_fields(raw, file_path)
    if fields[0] != b"P6":
        raise FormatError(f"{file_path}: not a binary PPM (magic {fields[0]!r})")
    try:
        width, height, maxval = (int(x) for x in fields[1:])
    except ValueError:
        raise FormatError(f"{file_path}: bad PPM header {fields}")
    if maxval != 255:
        raise FormatError(f"{file_path}: only maxval 255 is supported, got {maxval}")
    expected = width * height * 3
    if len(raw) - offset < expected:
        raise FormatError(f"{file_path}: truncated PPM pixel data")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=offset)
    return pixels.reshape(height, width, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_triptych(source, augmented, target, file_path):
    """source | augmented | target side by side, each C×H×W."""
    panels = [np.asarray(p, dtype=np.float64) for p in (source, augmented, target)]
    if len({p.shape for p in panels}) != 1:
        raise FormatError(f"Triptych panels differ in shape: {[p.shape for p in panels]}")
    write_ppm(np.concatenate(panels, axis=2), file_path)


def write_jsonl(records, file):
    with gzip.open(file, "wt") as f:
        with jsonlines.Writer(f) as writer:
            writer.write_all(records)
