// Acceptance suite: one test per criterion. Populated as modules land.
