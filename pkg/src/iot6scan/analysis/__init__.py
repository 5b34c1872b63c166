"""Aggregate analyses and report files built from scan snapshots."""
from .aggregates import (
    OTHER_COUNTRY,
    TOTAL,
    UNDEFINED,
    CertStats,
    ChurnReport,
    ChurnRow,
    Combinations,
    CountryDistribution,
    IssuerShare,
    Rate,
    cert_stats,
    churn,
    combination_counts,
    country_distribution,
    expiry_ecdf,
    handshake_rates,
    issuer_table,
    network_types,
    responsive,
    tls_version_distribution,
)
from .enrich import UNDISCLOSED_TYPE, UNKNOWN_COUNTRY, UNKNOWN_TYPE, EnrichmentError, EnrichmentTables
from .report import ReportOptions, build_report, certificate_records, write_report

__all__ = [
    "CertStats", "ChurnReport", "ChurnRow", "Combinations", "CountryDistribution", "EnrichmentError",
    "EnrichmentTables", "IssuerShare", "OTHER_COUNTRY", "Rate", "ReportOptions", "TOTAL", "UNDEFINED",
    "UNDISCLOSED_TYPE", "UNKNOWN_COUNTRY", "UNKNOWN_TYPE", "build_report", "cert_stats", "certificate_records",
    "churn", "combination_counts", "country_distribution", "expiry_ecdf", "handshake_rates", "issuer_table",
    "network_types", "responsive", "tls_version_distribution", "write_report",
]
