"""Recording-session containers and their on-disk formats.

A session couples a 32-channel EEG tensor at 250 Hz with pen events and a
kinematics stream. On disk: EEG as an STK1 tensor, events as CSV with
header ``sample_index,kind,char_class`` and kinematics as CSV with header
``sample_index,x,y,pressure,velocity``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import stk
from .exceptions import ContractError, FormatError, LabelError
from .validation import N_CLASSES, SAMPLING_RATE_HZ

PEN_DOWN = "pen_down"
PEN_UP = "pen_up"

# class order for the nine writable glyphs
CHARACTERS = ("H", "E", "L", "O", ",", "W", "R", "D", "!")
# "HELLO, WORLD!" without the space: 12 pen strokes per repetition
PHRASE_CLASSES = (0, 1, 2, 2, 3, 4, 5, 3, 6, 2, 7, 8)

EVENTS_HEADER = ["sample_index", "kind", "char_class"]
KINEMATICS_HEADER = ["sample_index", "x", "y", "pressure", "velocity"]


@dataclass
class PenEvent:
    sample_index: int
    kind: str  # PEN_DOWN or PEN_UP
    char_class: int


@dataclass
class RawSession:
    """One recording: EEG (channels x samples, microvolts), pen events,
    kinematics rows (sample_index, x, y, pressure, velocity)."""

    eeg: np.ndarray
    events: list[PenEvent]
    kinematics: np.ndarray
    sampling_rate_hz: float = SAMPLING_RATE_HZ

    def __post_init__(self):
        self.eeg = np.asarray(self.eeg, dtype=np.float64)
        if self.eeg.ndim != 2:
            raise ContractError(f"eeg must be (channels, samples), got {self.eeg.shape}")
        self.kinematics = np.asarray(self.kinematics, dtype=np.float64)
        if self.kinematics.ndim != 2 or self.kinematics.shape[1] != 5:
            raise ContractError("kinematics must be rows of (sample_index, x, y, pressure, velocity)")
        indices = [e.sample_index for e in self.events]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ContractError("event sample indices must be strictly increasing")
        kinds = [e.kind for e in self.events]
        for i, kind in enumerate(kinds):
            expected = PEN_DOWN if i % 2 == 0 else PEN_UP
            if kind != expected:
                raise ContractError("pen_down/pen_up events must alternate, starting pen_down")
        for e in self.events:
            if not 0 <= e.char_class < N_CLASSES:
                raise LabelError(f"char_class {e.char_class} outside [0, {N_CLASSES})")

    @property
    def n_channels(self) -> int:
        return self.eeg.shape[0]

    @property
    def n_samples(self) -> int:
        return self.eeg.shape[1]

    def pen_down_events(self) -> list[PenEvent]:
        return [e for e in self.events if e.kind == PEN_DOWN]

    def kinematics_segment(self, start: int, stop: int) -> np.ndarray:
        """Rows with start <= sample_index <= stop."""
        idx = self.kinematics[:, 0]
        return self.kinematics[(idx >= start) & (idx <= stop)]


@dataclass
class EpochSet:
    """Per-trial EEG windows, aligned trajectories, and class labels."""

    epochs: np.ndarray        # (n, 32, 250)
    trajectories: np.ndarray  # (n, 4, 250)
    labels: np.ndarray        # (n,) int in [0, 9)
    dropped_trials: int = 0

    def __post_init__(self):
        self.epochs = np.asarray(self.epochs, dtype=np.float64)
        self.trajectories = np.asarray(self.trajectories, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self):
        return self.epochs.shape[0]


def save_session(directory, session: RawSession, prefix="session") -> dict:
    """Write the three session files; returns their paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "eeg": directory / f"{prefix}_eeg.stk1",
        "events": directory / f"{prefix}_events.csv",
        "kinematics": directory / f"{prefix}_kinematics.csv",
    }
    stk.write_tensor(paths["eeg"], session.eeg)
    with open(paths["events"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVENTS_HEADER)
        for e in session.events:
            writer.writerow([e.sample_index, e.kind, e.char_class])
    with open(paths["kinematics"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(KINEMATICS_HEADER)
        for row in session.kinematics:
            writer.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
    return paths


def load_session(eeg_path, events_path, kinematics_path) -> RawSession:
    eeg = stk.read_tensor(eeg_path)
    events = []
    with open(events_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != EVENTS_HEADER:
            raise FormatError(f"{events_path}: expected header {EVENTS_HEADER}, got {header}")
        for row in reader:
            events.append(PenEvent(int(row[0]), row[1], int(row[2])))
    rows = []
    with open(kinematics_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != KINEMATICS_HEADER:
            raise FormatError(
                f"{kinematics_path}: expected header {KINEMATICS_HEADER}, got {header}"
            )
        for row in reader:
            rows.append([float(v) for v in row])
    kinematics = np.asarray(rows, dtype=np.float64).reshape(-1, 5)
    return RawSession(eeg=eeg, events=events, kinematics=kinematics)
