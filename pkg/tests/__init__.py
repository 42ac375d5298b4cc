"""Tests for mci-probe."""
