"""Request and response bodies of the tuning service."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator

from . import DEFAULT_TILE_SIZES


class ExpandRequest(BaseModel):
    loopnests: dict
    tile_sizes: list[int] = Field(default_factory=lambda: list(DEFAULT_TILE_SIZES))
    parallelize: bool = True
    # child indices to descend through before listing children
    path: list[int] = Field(default_factory=list)


class Child(BaseModel):
    index: int
    nest: int
    kind: Literal["tile", "interchange", "parallelize_thread"]
    pragma: str


class ChildCounts(BaseModel):
    tile: int = 0
    interchange: int = 0
    parallelize_thread: int = 0


class ExpandResponse(BaseModel):
    pragmas: list[str]
    children: list[Child]
    counts: ChildCounts


class RunRequest(BaseModel):
    compiler_cmdline: Optional[list[str]] = None
    cwd: Optional[str] = None
    synthetic: Optional[dict] = None
    loopnests: Optional[dict] = None
    tile_sizes: list[int] = Field(default_factory=lambda: list(DEFAULT_TILE_SIZES))
    parallelize: bool = True
    max_experiments: Optional[int] = Field(default=None, ge=1)
    wall_clock_budget: Optional[float] = Field(default=None, gt=0)
    timeout: Optional[float] = Field(default=None, gt=0)
    timeout_factor: float = Field(default=10.0, gt=0)
    repeats: int = Field(default=1, ge=1)
    keep_files: bool = False

    @model_validator(mode="after")
    def one_evaluator(self):
        if (self.compiler_cmdline is None) == (self.synthetic is None):
            raise ValueError("give exactly one of compiler_cmdline and synthetic")
        if self.compiler_cmdline is not None and "-c" in self.compiler_cmdline:
            raise ValueError("the compiler command line must link an executable; remove -c")
        if self.synthetic is not None and self.loopnests is None and "loopnests" not in self.synthetic:
            raise ValueError("synthetic runs need loopnests")
        return self


class BestConfig(BaseModel):
    number: int
    seconds: float
    pragmas: list[str]


class RunStatus(BaseModel):
    id: str
    state: Literal["queued", "running", "finished", "stopped", "failed"]
    experiments: int = 0
    expansions: int = 0
    baseline_seconds: Optional[float] = None
    best: Optional[BestConfig] = None
    error: Optional[str] = None


class TracePoint(BaseModel):
    experiment: int
    seconds: float


class Message(BaseModel):
    message: str
