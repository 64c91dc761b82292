import hashlib
import json
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    d: Optional[int] = Field(None, ge=1)
    d_hidden: int = Field(16, ge=1)
    n_way: Optional[int] = Field(None, ge=1)
    propagation_hops: int = Field(2, ge=0)
    leaky_slope: float = Field(0.2, gt=0.0, lt=1.0)

    def resolved(self, d: int, n_way: int) -> 'ModelConfig':
        return self.model_copy(update={'d': d, 'n_way': n_way})


class MetaConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    inner_lr: float = Field(0.1, gt=0.0)
    meta_lr: float = Field(0.001, ge=0.0)
    inner_steps: int = Field(1, ge=1)
    tasks_per_batch: int = Field(5, ge=1)
    max_episodes: int = Field(2000, ge=0)
    meta_gradient_mode: Literal['auto', 'exact', 'first_order'] = 'auto'
    exact_max_parameters: int = Field(5000, ge=1)
    patience: int = Field(10, ge=1)
    val_interval: int = Field(100, ge=1)
    val_tasks: int = Field(20, ge=0)
    finetune_steps: int = Field(10, ge=0)
    n_way: int = Field(2, ge=1)
    k_shot: int = Field(1, ge=1)
    k_query: int = Field(5, ge=1)
    m_tasks: int = Field(5, ge=1)


class SyntheticSpec(BaseModel):
    model_config = ConfigDict(extra='forbid')

    name: str = 'sbm'
    classes: int = Field(10, ge=2)
    nodes_per_class: int = Field(60, ge=1)
    p_in: float = Field(0.1, ge=0.0, le=1.0)
    p_out: float = Field(0.01, ge=0.0, le=1.0)
    dim: int = Field(16, ge=1)
    separation: float = Field(4.0, ge=0.0)
    std: float = Field(1.0, ge=0.0)
    split_counts: Tuple[int, int, int] = (6, 2, 2)
    seed: int = 0

    @model_validator(mode='after')
    def _check(self):
        if self.p_out > self.p_in:
            raise ValueError('p_out must not exceed p_in')
        if sum(self.split_counts) != self.classes:
            raise ValueError(f'split_counts {self.split_counts} must sum to classes={self.classes}')
        return self


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    name: str = 'experiment'
    dataset: Optional[str] = None
    synthetic: Optional[SyntheticSpec] = None
    noise_kind: Literal['symmetric', 'asymmetric'] = 'symmetric'
    epsilon: float = Field(0.0, ge=0.0, le=1.0)
    model: ModelConfig = Field(default_factory=ModelConfig)
    meta: MetaConfig = Field(default_factory=MetaConfig)
    n_test_tasks: int = Field(100, ge=1)
    n_repetitions: int = Field(10, ge=1)
    master_seed: int = 0
    variant: Literal['full', 'mlp', 'mean', 'naive'] = 'full'
    record_wall_time: bool = False
    workers: int = Field(1, ge=0)

    @field_validator('noise_kind', mode='before')
    @classmethod
    def _alias_kind(cls, v):
        return {'sym': 'symmetric', 'asym': 'asymmetric'}.get(v, v)

    @model_validator(mode='after')
    def _check(self):
        if self.dataset and self.synthetic:
            raise ValueError('give either dataset or synthetic, not both')
        if self.variant == 'naive' and self.meta.m_tasks != 1:
            raise ValueError('the naive variant runs with m_tasks = 1')
        return self

    @property
    def n_way(self) -> int:
        return self.meta.n_way

    @property
    def k_shot(self) -> int:
        return self.meta.k_shot

    @property
    def k_query(self) -> int:
        return self.meta.k_query

    @property
    def m_tasks(self) -> int:
        return self.meta.m_tasks

    @property
    def dataset_name(self) -> str:
        if self.dataset:
            return self.dataset.rstrip('/\\').replace('\\', '/').split('/')[-1]
        return (self.synthetic or SyntheticSpec()).name

    def with_updates(self, **updates) -> 'ExperimentConfig':
        """Copy with top-level and `meta.` updates, re-validated."""
        data = self.model_dump()
        for key, value in updates.items():
            if key.startswith('meta.'):
                data['meta'][key[5:]] = value
            else:
                data[key] = value
        return ExperimentConfig.model_validate(data)

    def fingerprint(self) -> str:
        payload = self.model_dump(mode='json', exclude={'record_wall_time', 'workers'})
        canon = json.dumps(payload, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canon.encode('utf-8')).hexdigest()[:16]


class TrainLogEntry(BaseModel):
    episode: int
    train_loss: float
    val_accuracy: Optional[float] = None
    val_clean_accuracy: Optional[float] = None


class ResultRecord(BaseModel):
    fingerprint: str
    name: str
    dataset: str
    variant: str
    n_way: int
    k_shot: int
    m_tasks: int
    noise_kind: str
    epsilon: float
    accuracies: List[float]
    mean: float
    std: float
    wall_s: float
    master_seed: int
    seed_lineage: Dict[str, int]
    config: dict

    @field_validator('accuracies')
    @classmethod
    def _in_unit_interval(cls, v):
        if any(not 0.0 <= a <= 1.0 for a in v):
            raise ValueError('accuracies must lie in [0, 1]')
        return v

    @classmethod
    def from_run(cls, config: ExperimentConfig, accuracies: List[float], wall_s: float,
                 seed_lineage: Dict[str, int]) -> 'ResultRecord':
        accs = np.asarray(accuracies, dtype=np.float64)
        return cls(
            fingerprint=config.fingerprint(),
            name=config.name,
            dataset=config.dataset_name,
            variant=config.variant,
            n_way=config.n_way,
            k_shot=config.k_shot,
            m_tasks=config.m_tasks,
            noise_kind=config.noise_kind,
            epsilon=config.epsilon,
            accuracies=[float(a) for a in accs],
            mean=float(accs.mean()),
            std=float(accs.std()),
            wall_s=float(wall_s) if config.record_wall_time else 0.0,
            master_seed=config.master_seed,
            seed_lineage=seed_lineage,
            config=config.model_dump(mode='json'),
        )


class LedgerRow(BaseModel):
    id: int
    fingerprint: str
    name: str
    dataset: str
    variant: str
    noise_kind: str
    epsilon: float
    mean_acc: float
    std_acc: float
    rep_count: int
    recorded_at: str


class VariantSummary(BaseModel):
    count: int
    best_mean_acc: Optional[float] = None


class SummaryResponse(BaseModel):
    total_results: int
    by_variant: Dict[str, VariantSummary]
    last_recorded_at: Optional[str] = None
