"""Recurrent preference-memory recommender.

A compact sequential recommender that compresses each consumed interaction
segment into a tiny fixed-width memory matrix, conditions the next segment
on that memory, and trains the whole loop in parallel with a two-stage
teacher-forced scheme. Pure numpy; built to be inspected and unit tested
end to end on a laptop.
"""

__version__ = "0.1.0"
