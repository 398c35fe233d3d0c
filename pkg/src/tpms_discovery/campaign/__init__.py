"""Closed-loop discovery campaigns: state, ingestion, proposals, reports, virtual lab."""
from .loop import (
    SingleReplicateWarning,
    add_primitives,
    design_id,
    design_validity,
    export_batch_meshes,
    ingest_curves,
    ingest_results,
    init_campaign,
    measure_virtually,
    propose_next_batch,
    record_batch,
    run_virtual_campaign,
)
from .report import CampaignReport, build_report, format_table, principal_components, write_report
from .state import (
    Batch,
    CampaignConfig,
    CampaignError,
    CampaignState,
    Design,
    Measurement,
    SchemaVersionError,
)
from .virtual_lab import VirtualLab

__all__ = [
    "Batch", "CampaignConfig", "CampaignError", "CampaignReport", "CampaignState", "Design", "Measurement",
    "SchemaVersionError", "SingleReplicateWarning", "VirtualLab", "add_primitives", "build_report",
    "design_id", "design_validity", "export_batch_meshes", "format_table", "ingest_curves", "ingest_results",
    "init_campaign", "measure_virtually", "principal_components", "propose_next_batch", "record_batch",
    "run_virtual_campaign", "write_report",
]
