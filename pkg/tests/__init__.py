"""Test suite for smart-monitor."""
