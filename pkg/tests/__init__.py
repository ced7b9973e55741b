"""Tests for insideout-tracker."""
