"""Recurrent cells (vanilla, GRU, LSTM) and multi-layer stacks with residuals."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor

CELL_KINDS = ("vanilla", "gru", "lstm")
RESIDUAL_MODES = ("none", "standard", "dense")
_GATES = {"vanilla": 1, "gru": 3, "lstm": 4}


class ParameterSet(dict):
    """Ordered ``name -> Parameter`` mapping that refuses duplicate names."""

    def new(self, name: str, data: np.ndarray) -> Parameter:
        if name in self:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data)
        self[name] = p
        return p

    def count(self) -> int:
        return int(sum(p.data.size for p in self.values()))


@dataclass(frozen=True)
class CellSpec:
    kind: str
    input_dim: int
    units: int
    forget_bias: float = 1.0

    def __post_init__(self):
        if self.kind not in CELL_KINDS:
            raise ValueError(f"cell kind must be one of {CELL_KINDS}, got {self.kind!r}")
        if self.units <= 0 or self.input_dim <= 0:
            raise ValueError("cell dimensions must be positive")

    @property
    def num_parameters(self) -> int:
        return _GATES[self.kind] * (self.input_dim + self.units + 1) * self.units


@dataclass
class CellState:
    h: Tensor
    c: Tensor | None = None

    def select(self, index: np.ndarray) -> "CellState":
        """Reorder/replicate along the batch axis (inference only)."""
        c = None if self.c is None else Tensor._wrap(self.c.data[index])
        return CellState(Tensor._wrap(self.h.data[index]), c)


class Cell:
    """One recurrent layer.

    The input-to-hidden weights of all gates are fused into one matrix
    ``W [in, G*units]`` so a whole sequence can be projected with a single
    matmul (``project``); ``step_projected`` then does the recurrent part.
    Gate order is ``[z, r, candidate]`` for GRU and ``[i, f, g, o]`` for LSTM.
    """

    def __init__(self, spec: CellSpec, params: ParameterSet, prefix: str,
                 rng: np.random.Generator, init_scale: float = 0.04):
        self.spec = spec
        u, n, g = spec.units, spec.input_dim, _GATES[spec.kind]
        self.W = params.new(f"{prefix}/W", T.init((n, g * u), "uniform", rng, init_scale))
        if spec.kind == "gru":
            # candidate's recurrent weights act on r*h, so they are kept apart
            self.U = params.new(f"{prefix}/U", T.init((u, 2 * u), "uniform", rng, init_scale))
            self.Uc = params.new(f"{prefix}/Uc", T.init((u, u), "uniform", rng, init_scale))
        else:
            self.U = params.new(f"{prefix}/U", T.init((u, g * u), "uniform", rng, init_scale))
            self.Uc = None
        b = T.init((g * u,), "zeros")
        if spec.kind == "gru":
            b[:u] = spec.forget_bias
        elif spec.kind == "lstm":
            b[u:2 * u] = spec.forget_bias
        self.b = params.new(f"{prefix}/b", b)

    def zero_state(self, batch: int) -> CellState:
        z = np.zeros((batch, self.spec.units), dtype=self.W.data.dtype)
        return CellState(Tensor._wrap(z), Tensor._wrap(z.copy()) if self.spec.kind == "lstm" else None)

    def project(self, x) -> Tensor:
        return T.add(T.matmul(x, self.W.value), self.b.value)

    def step(self, x, state: CellState) -> CellState:
        if x.shape[-1] != self.spec.input_dim:
            raise ShapeError(f"cell expects input dim {self.spec.input_dim}, got {x.shape[-1]}")
        return self.step_projected(self.project(x), state)

    def step_projected(self, xw: Tensor, state: CellState) -> CellState:
        h = state.h
        u = self.spec.units
        if h.shape[-1] != u:
            raise ShapeError(f"cell expects state dim {u}, got {h.shape[-1]}")
        kind = self.spec.kind
        if kind == "vanilla":
            return CellState(T.tanh(T.add(xw, T.matmul(h, self.U.value))))
        if kind == "gru":
            zr = T.sigmoid(T.add(xw[:, :2 * u], T.matmul(h, self.U.value)))
            z, r = zr[:, :u], zr[:, u:]
            cand = T.tanh(T.add(xw[:, 2 * u:], T.matmul(T.mul(r, h), self.Uc.value)))
            # h' = z*h + (1-z)*cand
            return CellState(T.add(cand, T.mul(z, T.sub(h, cand))))
        if state.c is None:
            raise ValueError("LSTM step needs a cell state c")
        pre = T.add(xw, T.matmul(h, self.U.value))
        gates = T.sigmoid(pre)
        i, f, o = gates[:, :u], gates[:, u:2 * u], gates[:, 3 * u:]
        g = T.tanh(pre[:, 2 * u:3 * u])
        c = T.add(T.mul(f, state.c), T.mul(i, g))
        return CellState(T.mul(o, T.tanh(c)), c)


@dataclass(frozen=True)
class StackSpec:
    layers: tuple
    residual: str = "none"
    dropout: float = 0.0

    def __post_init__(self):
        if self.residual not in RESIDUAL_MODES:
            raise ValueError(f"residual mode must be one of {RESIDUAL_MODES}, got {self.residual!r}")
        if not self.layers:
            raise ValueError("a stack needs at least one layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.dropout}")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.input_dim != prev.units:
                raise ShapeError(f"layer input dim {cur.input_dim} != previous units {prev.units}")
            if self.residual != "none" and cur.input_dim != cur.units:
                raise ShapeError("residual stacks need equal input/output dims beyond the first layer")

    @property
    def residual_from_input(self) -> bool:
        """Whether layer 0's input joins the residual path (needs matching dims)."""
        first = self.layers[0]
        return self.residual != "none" and first.input_dim == first.units

    @property
    def output_dim(self) -> int:
        return self.layers[-1].units

    @property
    def num_parameters(self) -> int:
        return sum(c.num_parameters for c in self.layers)


def make_stack_spec(kind: str, input_dim: int, units: int, depth: int, residual: str = "none",
                    dropout: float = 0.0, forget_bias: float = 1.0) -> StackSpec:
    layers = tuple(CellSpec(kind, input_dim if i == 0 else units, units, forget_bias)
                   for i in range(depth))
    return StackSpec(layers, residual, dropout)


class Stack:
    """Layers of cells joined by plain, standard-residual or dense-residual links.

    With ``x0`` the stack input and ``h_l`` layer l's output, layer l+1 reads
    ``h_l`` (none), ``h_l + x_l`` (standard) or ``h_l + x_0 + ... + x_l``
    (dense).  Dropout is applied to every layer's input before the cell.
    """

    def __init__(self, spec: StackSpec, params: ParameterSet, prefix: str,
                 rng: np.random.Generator, init_scale: float = 0.04):
        self.spec = spec
        self.cells = [Cell(c, params, f"{prefix}/layer{i}", rng, init_scale)
                      for i, c in enumerate(spec.layers)]

    def zero_state(self, batch: int) -> list:
        return [c.zero_state(batch) for c in self.cells]

    def _next_input(self, h, x, history: list):
        mode = self.spec.residual
        if mode == "none":
            return h
        if mode == "standard":
            return T.add(h, x) if h.shape[-1] == x.shape[-1] else h
        if h.shape[-1] == x.shape[-1]:
            history.append(x)
        out = h
        for prev in history:
            out = T.add(out, prev)
        return out

    def step(self, x, states: list, training: bool = False, rng=None) -> tuple:
        """Advance every layer by one time step; returns (output, new states)."""
        if len(states) != len(self.cells):
            raise ValueError(f"expected {len(self.cells)} layer states, got {len(states)}")
        new_states = []
        history: list = []
        for cell, state in zip(self.cells, states):
            inp = T.dropout(x, self.spec.dropout, training, rng)
            st = cell.step(inp, state)
            new_states.append(st)
            x = self._next_input(st.h, x, history)
        return x, new_states

    def run(self, xs, mask: np.ndarray | None = None, states: list | None = None,
            training: bool = False, rng=None) -> tuple:
        """Unroll over a time-major sequence ``xs [T, B, in]`` layer by layer.

        ``mask [T, B]`` freezes each row's state after its last valid step, so
        the returned final states belong to each sequence's true end.
        """
        steps, batch = xs.shape[0], xs.shape[1]
        if states is None:
            states = self.zero_state(batch)
        if mask is not None and mask.all():
            mask = None
        if mask is not None:
            mask = mask.astype(xs.dtype)[:, :, None]
        history: list = []
        finals = []
        x = xs
        for cell, state in zip(self.cells, states):
            inp = T.dropout(x, self.spec.dropout, training, rng)
            proj = T.reshape(cell.project(T.reshape(inp, (steps * batch, -1))), (steps, batch, -1))
            outs = []
            for t in range(steps):
                new = cell.step_projected(proj[t], state)
                if mask is not None and not mask[t].all():
                    m = mask[t]
                    new = CellState(T.add(state.h, T.mul(m, T.sub(new.h, state.h))),
                                    None if new.c is None
                                    else T.add(state.c, T.mul(m, T.sub(new.c, state.c))))
                state = new
                outs.append(state.h)
            finals.append(state)
            x = self._next_input(T.stack(outs, 0), x, history)
        return x, finals
