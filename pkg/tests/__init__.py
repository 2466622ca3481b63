"""Test suite for rpcline."""
