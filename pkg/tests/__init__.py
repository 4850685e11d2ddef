"""Tests for the SRH pipeline."""
