"""Tests for mmwave-uav-sim."""
