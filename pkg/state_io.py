"""
Binary train-state files and the CSV loss history.

State layout (all integers little-endian)::

    b"MLGSC-STATE v1\\n"
    u32 block count
    per block: u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims,
               float64 little-endian payload in C order
"""
import struct
from pathlib import Path
from typing import Dict, List, Mapping, Sequence

import numpy as np
import pandas as pd

from encoder import AttentionParams, GcnParams
from fusion_sx import SelfExpressionState
from logging_config import get_logger
from numerics import MLGSCError
from trainer import COMPONENTS, TrainState, UncertaintyWeights
from views import GraphView

logger = get_logger('state_io')

STATE_MAGIC = b'MLGSC-STATE v1\n'
HISTORY_COLUMNS = ['epoch'] + [f'l_{c}' for c in COMPONENTS] + [f'w_{c}' for c in COMPONENTS] + ['total']


class StateFormatError(MLGSCError):
    """State file is truncated, has the wrong magic or lacks a block."""


class StateCompatibilityError(MLGSCError):
    """State and data disagree on nodes, families or feature dimensions."""


# ============================================================================
# STATE FILES
# ============================================================================

def state_blocks(state: TrainState) -> Dict[str, np.ndarray]:
    blocks = dict(state.parameters())
    blocks['sx.lambda'] = np.array(state.sx.lam)
    blocks['meta.epoch'] = np.array(float(state.epoch))
    blocks['meta.n_nodes'] = np.array(float(state.n_nodes))
    return blocks


def save_state(path, state: TrainState) -> Path:
    path = Path(path)
    blocks = state_blocks(state)
    chunks = [STATE_MAGIC, struct.pack('<I', len(blocks))]
    for name, array in blocks.items():
        encoded = name.encode('utf-8')
        array = np.asarray(array, dtype=np.float64)
        chunks.append(struct.pack('<H', len(encoded)) + encoded)
        chunks.append(struct.pack('<B', array.ndim) + struct.pack(f'<{array.ndim}I', *array.shape))
        chunks.append(np.ascontiguousarray(array).astype('<f8').tobytes())
    path.write_bytes(b''.join(chunks))
    logger.info(f"Saved train state to {path}", extra={'extra_fields': {'blocks': len(blocks)}})
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise StateFormatError(
                f"state file truncated: wanted {size} bytes at offset {self.offset}, file has {len(self.data)}")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_blocks(path) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise StateFormatError(f"state file not found: {path}")
    reader = _Reader(path.read_bytes())
    if reader.take(len(STATE_MAGIC)) != STATE_MAGIC:
        raise StateFormatError(f"{path} does not start with the MLGSC-STATE v1 magic")

    (count,) = reader.unpack('<I')
    blocks = {}
    for _ in range(count):
        (name_len,) = reader.unpack('<H')
        name = reader.take(name_len).decode('utf-8')
        (ndim,) = reader.unpack('<B')
        shape = reader.unpack(f'<{ndim}I') if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        blocks[name] = np.frombuffer(reader.take(8 * size), dtype='<f8').astype(np.float64).reshape(shape)
    if reader.offset != len(reader.data):
        raise StateFormatError(f"{path} has {len(reader.data) - reader.offset} trailing bytes")
    return blocks


def load_state(path) -> TrainState:
    """Rebuild parameters from a state file; moments and history are not stored."""
    blocks = read_blocks(path)

    def block(name: str) -> np.ndarray:
        if name not in blocks:
            raise StateFormatError(f"state file {path} lacks block {name!r}")
        return blocks[name].copy()

    families = [name.split('.')[1] for name in blocks if name.startswith('gcn.') and name.endswith('.W1')]
    if not families:
        raise StateFormatError(f"state file {path} holds no encoder blocks")
    gcn = {f: GcnParams(W1=block(f'gcn.{f}.W1'), W2=block(f'gcn.{f}.W2'), family=f) for f in families}
    attention = {f: AttentionParams(M=block(f'attention.{f}.M'), family=f) for f in families}
    sx = SelfExpressionState(C=block('sx.C'), lam=float(block('sx.lambda')))
    if int(block('meta.n_nodes')) != sx.n_nodes:
        raise StateFormatError(f"meta.n_nodes disagrees with sx.C in {path}")
    return TrainState(gcn=gcn, attention=attention, sx=sx,
                      uncertainty=UncertaintyWeights(log_sigma=block('uncertainty.log_sigma')),
                      epoch=int(block('meta.epoch')))


def check_compatible(state: TrainState, views_by_family: Mapping[str, Sequence[GraphView]]) -> None:
    """Raise StateCompatibilityError unless the state can encode these views."""
    missing = [f for f in views_by_family if f not in state.gcn]
    if missing:
        raise StateCompatibilityError(f"state has no encoder for families {missing}")
    for family, views in views_by_family.items():
        n, d = views[0].features.shape
        if n != state.n_nodes:
            raise StateCompatibilityError(f"state was trained on {state.n_nodes} nodes, data has {n}")
        expected = state.gcn[family].W1.shape[0]
        if d != expected:
            raise StateCompatibilityError(
                f"{family} features have {d} dimensions, state expects {expected}")


# ============================================================================
# LOSS HISTORY
# ============================================================================

def history_frame(history: Sequence[Mapping[str, float]]) -> pd.DataFrame:
    frame = pd.DataFrame(list(history), columns=HISTORY_COLUMNS)
    frame['epoch'] = frame['epoch'].astype(int)
    return frame


def save_history(path, history: Sequence[Mapping[str, float]]) -> Path:
    path = Path(path)
    history_frame(history).to_csv(path, index=False)
    return path


def load_history(path) -> List[Dict[str, float]]:
    frame = pd.read_csv(path, float_precision='round_trip')
    missing = [c for c in HISTORY_COLUMNS if c not in frame.columns]
    if missing:
        raise StateFormatError(f"loss history {path} lacks columns {missing}")
    return [{column: float(row[column]) for column in HISTORY_COLUMNS}
            for row in frame.to_dict(orient='records')]
