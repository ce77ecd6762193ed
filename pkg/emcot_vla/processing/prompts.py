"""
Тексты запросов трёх стадий аннотации и их заполнение.
"""

import hashlib

NARRATIVE_TEMPLATE = """You are an expert roboticist analyzing a human or robot demonstration. Your task is to write a SINGLE, COHERENT, HIGH-LEVEL NARRATIVE paragraph that STRICTLY follows the TEMPORAL ORDER.

- Overall Goal: {instruction}
- Per-frame low-level actions are provided for context only—DO NOT copy or list them.
- Low-level Arm Actions:
{frame_lines}

Instructions:
1. Describe the task step by step in exact chronological order.
2. Explicitly state simultaneous bimanual actions (e.g., "At the same time, the left hand stabilizes... while the right hand unscrews...").
3. Focus on purpose: explain what each action achieves toward the goal.
4. Use specific object names when identifiable.

Output Rules: Produce exactly one fluent paragraph (2–4 sentences). Output ONLY the narrative. No markdown, bullets, or extra text."""

SUBTASK_TEMPLATE = """You are an expert in robotic task analysis. Based on the task narrative below, decompose the task into a sequence of HIGH-SEMANTIC, GOAL-ORIENTED SUBTASKS.

- Task Narrative: {narrative}

Instructions:
1. Split the narrative into discrete subtasks in strict chronological order.
2. Represent coordinated bimanual actions as ONE subtask (never split).
3. Express high-level intent (e.g., "Assemble the lid onto the container"), not low-level motions (e.g., "move", "grab").
4. Use imperative, active voice; keep the list short (typically 2–5 subtasks).

Output Format: Return ONLY a JSON list of strings. Example: ["Pick up red cup", "Pour water into cup"]"""

ALIGNMENT_TEMPLATE = """You are the autonomous onboard controller of a robot. You are currently executing a task. Describe your reasoning in the FIRST PERSON ("I", "me").

- Overall Goal: {instruction}
- Planned Subtask Sequence:
{subtask_lines}
- Low-level Arm Actions:
{frame_lines}

Instructions:
1. For each segment, explain your internal decision-making logic from a first-person view.
2. Include: (a) visual observation, (b) goal-driven inference, (c) movement logic.
3. Ensure physical alignment: do not claim a subtask has started if low-level logs show idle.
4. Keep reasoning under 50 words per segment; account for every frame.

Output Format: Return ONLY a JSON list of objects with keys: "subtask", "frame" (as [start, end]), and "reasoning"."""


def frame_lines(sentences: list[dict[str, str]]) -> str:
    """
    Нумерованные строки действий рук, по одной на кадр.
    """
    return "\n".join(
        f"  {t + 1}. Frame_id:{t}, Left arm action:{row['left']}, Right arm action:{row['right']}"
        for t, row in enumerate(sentences)
    )


def render_narrative_prompt(instruction: str, sentences: list[dict[str, str]]) -> str:
    return NARRATIVE_TEMPLATE.format(instruction=instruction, frame_lines=frame_lines(sentences))


def render_subtask_prompt(narrative: str) -> str:
    return SUBTASK_TEMPLATE.format(narrative=narrative)


def render_alignment_prompt(instruction: str, plan: list[str], sentences: list[dict[str, str]]) -> str:
    subtask_lines = "\n".join(f"  {i + 1}. {subtask}" for i, subtask in enumerate(plan))
    return ALIGNMENT_TEMPLATE.format(
        instruction=instruction, subtask_lines=subtask_lines, frame_lines=frame_lines(sentences)
    )


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()
