import pytest
from hypothesis import given, settings, strategies as st

from vera.prompting import (
    LearnerTemplate,
    OptimizerTemplate,
    ParseFailure,
    QuestionSet,
    WrongCount,
    load_learner_template,
    load_optimizer_template,
    load_preset_questions,
    parse_binary_verdict,
    parse_explanation,
    parse_question_set,
    render_learner_prompt,
    render_optimizer_prompt,
    split_rendered_sections,
)

LEARNER = load_learner_template()
OPTIMIZER = load_optimizer_template()


def test_initial_preset_rendered_in_order():
    q0 = load_preset_questions("initial")
    prompt = render_learner_prompt(LEARNER, q0)
    first = prompt.index("1. Is there any suspicious person or object")
    second = prompt.index("2. Is there any behavior")
    assert first < second
    headers = [line for line in prompt.splitlines() if line.startswith("## ")]
    assert headers == ["## Model Description", "## Prompt Questions", "## Input", "## Output Formatting"]


def test_single_question():
    prompt = render_learner_prompt(LEARNER, QuestionSet(("Is there smoke?",)))
    body = split_rendered_sections(prompt)["Prompt Questions"]
    assert "1. Is there smoke?" in body and "2." not in body


def test_learner_render_is_pure():
    q = load_preset_questions("ucf_crime")
    assert render_learner_prompt(LEARNER, q, 8, True) == render_learner_prompt(LEARNER, q, 8, True)


def test_image_placeholders_and_explanation_request():
    q = load_preset_questions("initial")
    sections = split_rendered_sections(render_learner_prompt(LEARNER, q, n_images=3, explain=True))
    assert sections["Input"].split().count("<image>") == 3
    assert "explanation in one sentence" in sections["Output Formatting"]
    assert "explanation" not in split_rendered_sections(render_learner_prompt(LEARNER, q))["Output Formatting"].lower()


def test_optimizer_prompt_lists_pairs():
    q = load_preset_questions("initial")
    prompt = render_optimizer_prompt(OPTIMIZER, q, [1, 0], [1, 1], m=5)
    sections = split_rendered_sections(prompt)
    assert list(sections) == [
        "Instruction",
        "Inputs",
        "Model Description",
        "Current Prompt Questions",
        "Model Predictions & Targets",
        "Optimization Instruction",
    ]
    assert "Video 1: prediction = 1, target = 1" in sections["Model Predictions & Targets"]
    assert "Video 2: prediction = 0, target = 1" in sections["Model Predictions & Targets"]
    assert "exactly 5" in sections["Optimization Instruction"]
    assert prompt == render_optimizer_prompt(OPTIMIZER, q, [1, 0], [1, 1], m=5)


def test_optimizer_prompt_length_mismatch():
    with pytest.raises(ValueError):
        render_optimizer_prompt(OPTIMIZER, load_preset_questions("initial"), [1], [1, 0])


@pytest.mark.parametrize(
    "reply, expected",
    [
        ("The scene shows a fight.\nAnswer: 1", 1),
        ("Anomaly: No. The scene is a quiet street.", 0),
        ("answer: 0", 0),
        ("ANOMALY: yes", 1),
        ("Thinking... Answer: 0\nOn reflection, Answer: 1", 1),
        ("**1**", 1),
        ("Verdict follows\n0", 0),
        ("Answer: **1**", 1),
    ],
)
def test_verdict_forms(reply, expected):
    assert parse_binary_verdict(reply) == expected


@pytest.mark.parametrize("reply", ["the video shows people", "", "There are 10 people and 1 dog."])
def test_verdict_absent(reply):
    with pytest.raises(ParseFailure):
        parse_binary_verdict(reply)


@given(st.text())
def test_verdict_never_outside_binary(text):
    try:
        assert parse_binary_verdict(text) in (0, 1)
    except ParseFailure:
        pass


def test_explanation():
    assert parse_explanation("Answer: 1\nExplanation: A man hits a car.") == "A man hits a car."
    assert parse_explanation("Answer: 1") == ""


def _numbered(n):
    return "\n".join(f"{i}. Question number {i}?" for i in range(1, n + 1))


def test_parse_five_questions():
    q = parse_question_set("Here you go:\n" + _numbered(5) + "\nHope this helps.", 5)
    assert q.m == 5 and q.questions[4] == "Question number 5?"


def test_parse_wrong_count():
    with pytest.raises(WrongCount) as info:
        parse_question_set(_numbered(3), 5)
    assert info.value.count == 3


def test_parse_prose():
    with pytest.raises(ParseFailure):
        parse_question_set("I think the questions are fine as they are.", 5)


def test_parse_duplicates_rejected():
    with pytest.raises(ParseFailure):
        parse_question_set("1. Same?\n2. Same?", 2)


question_text = st.text(
    alphabet=st.characters(whitelist_categories=("L", "N", "Zs"), whitelist_characters="?,'-"),
    min_size=1,
    max_size=80,
).map(str.strip).filter(bool)


@settings(max_examples=100, deadline=None)
@given(st.lists(question_text, min_size=1, max_size=8, unique=True), st.text(alphabet="abc ,.\n", max_size=40))
def test_question_round_trip(questions, filler):
    q = QuestionSet(tuple(questions))
    reply = f"{filler}\nRevised questions:\n{q.numbered()}\nThanks."
    assert parse_question_set(reply, q.m).questions == q.questions


def test_question_set_invariants():
    with pytest.raises(ValueError):
        QuestionSet(())
    with pytest.raises(ValueError):
        QuestionSet(("a?", "a?"))
    with pytest.raises(ValueError):
        QuestionSet(("x" * 501,))
    assert QuestionSet(("x" * 20,), budget=20).m == 1


def test_template_invariants():
    with pytest.raises(ValueError):
        LearnerTemplate("desc", "header", "Reply with a verdict.")
    with pytest.raises(ValueError):
        OptimizerTemplate("inst", "desc", "Write five questions.")
    with pytest.raises(ValueError):
        LearnerTemplate("", "header", "Answer: <0|1>")


def test_custom_template_file(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("[[Model Description]]\nYou watch CCTV.\n[[Prompt Questions]]\nConsider:\n[[Output Formatting]]\nReply 'Answer: 0' or 'Answer: 1'.\n")
    t = load_learner_template(p)
    assert t.model_description == "You watch CCTV."


def test_ucf_preset_has_five_questions():
    assert load_preset_questions("ucf_crime").m == 5
    with pytest.raises(KeyError):
        load_preset_questions("nonexistent")
