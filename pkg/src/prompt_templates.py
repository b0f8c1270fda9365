"""
Prompt Template Strings

Every fixed English string that appears in a prompt. Strings that surround
a node token are stored as (before, after) pairs.
"""

INSTRUCTION = "Given an ego-network in a job marketplace: "

# Separates the ego-graph token run from what follows
SEGMENT_BREAK = "\n"

# "the biography of the center member <k> is:"
FEATURE_QUESTION = ("the {feature} of the center {entity} ", " is:")

# First relation step, keyed by the one-hop metapath it describes
RELATION_QUESTIONS = {
    "UU": ("the center member ", " follows these members:"),
    "UI": ("the center member ", " is interested in these jobs:"),
    "IU": ("the center job ", " is of interest to these members:"),
}

# Final step of a two-hop metapath, keyed by its last two letters
FINAL_RELATION_QUESTIONS = {
    "IU": "the following users are also interested in some of these jobs:",
    "UI": "some of these members are interested in the following jobs:",
    "UU": "some of these members follow the following members:",
}

# Node-level task questions
MULTI_SKILL_QUESTION = "The member could possess the following skills:"
BINARY_SKILL_QUESTION = "does the member possess the skill {name}?"
WORK_MODE_QUESTION = "The member prefers the following work mode:"

TASK_QUESTIONS = {
    "coding": BINARY_SKILL_QUESTION.format(name="coding"),
    "management": BINARY_SKILL_QUESTION.format(name="management"),
    "work_mode": WORK_MODE_QUESTION,
}

# Link-level observed neighbors and question, keyed by relation tag
LINK_OBSERVED = {
    "uu": ("The center ", " currently follows: "),
    "ui": ("The center ", " is currently interested in: "),
}

# Member wording kept verbatim (sic)
LINK_QUESTIONS = {
    "uu": "The member may be interested following in these members:",
    "ui": "The member may be interested in these jobs:",
}
