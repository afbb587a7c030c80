#!/usr/bin/env python3
"""Generate the evaluation dataset, scripted playbook and interaction log.

Writes:
  fixtures/dataset/tasks.jsonl       20 labeled tasks (11 direct, 6 rules, 3 queries)
  fixtures/playbook.json             scripted responses for every stage the tasks hit
  fixtures/logs/interactions.jsonl   100 interaction-log entries (seeded)

The script re-implements the service's bag-of-words hashing embedder so it
can check, before writing anything, that rephrasings land on the intended
side of the task threshold and that unrelated subtasks on one device never
clear the subtask threshold.
"""

import json
import math
import random
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent / "fixtures"
TAU_TASK = 0.85
TAU_SUBTASK = 0.80
# Keep every checked similarity this far from a threshold so float rounding
# differences between implementations cannot flip a decision.
MARGIN = 0.02

LATENCY_MS = {
    "Classify": 350,
    "Decompose": 1200,
    "Derive": 900,
    "ContextKeyword": 300,
    "Refine": 1100,
    "SelfCorrect": 950,
    "AlternativeSuggest": 600,
}

# --------------------------------------------------------------------------
# Embedding oracle (mirrors the hashing embedder)
# --------------------------------------------------------------------------

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
DIM = 256


def embed(text):
    cleaned = "".join(c for c in text.lower() if c.isalnum() or c.isspace())
    v = [0.0] * DIM
    for tok in cleaned.split():
        h = FNV_OFFSET
        for b in tok.encode("utf-8"):
            h = ((h ^ b) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
        v[h % DIM] += 1.0
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def cos(a, b):
    return sum(x * y for x, y in zip(embed(a), embed(b)))


# --------------------------------------------------------------------------
# Command builders (derive wire shape)
# --------------------------------------------------------------------------


def cmd(desc, device, capability, command, value=None):
    if value is None:
        v = {}
    else:
        kind, payload = value
        v = {kind: payload}
    return {"desc": desc, "device": {"name": device, "capability": {"name": capability, "command": command, "value": v}}}


def cond(desc, device, capability, attribute, comparator, value):
    kind, payload = value
    return {
        "desc": desc,
        "device": {
            "name": device,
            "capability": {"name": capability, "attribute": attribute, "comparator": comparator, "value": {kind: payload}},
        },
    }


def action(desc, device, commands):
    return {"role": "action", "subtask": desc, "device": device, "derive": {"subtask": desc, "commands": commands}}


def trigger(desc, device, condition):
    return {"role": "trigger", "subtask": desc, "device": device, "derive": {"subtask": desc, "condition": condition}}


def query(desc, device, capability, attribute):
    return {"role": "query", "subtask": desc, "device": device, "capability": capability, "attribute": attribute}


AC_LISTING = [
    cmd("Turn on air conditioner", "air conditioner", "switch", "on"),
    cmd("Set mode to [mode_value]", "air conditioner", "airConditionerMode", "setAirConditionerMode", ("string", "[mode_value]")),
    cmd(
        "Set temperature to [temperature_value]",
        "air conditioner",
        "thermostatCoolingSetpoint",
        "setCoolingSetpoint",
        ("decimal", "[temperature_value]"),
    ),
]

ADJUST_AC = action("Adjust air conditioner temperature", "air conditioner", AC_LISTING)
HUMIDIFIER = action(
    "Set humidifier level",
    "humidifier",
    [
        cmd("Turn on humidifier", "humidifier", "switch", "on"),
        cmd("Set humidity to [humidity_value]", "humidifier", "humiditySetpoint", "setHumiditySetpoint", ("integer", "[humidity_value]")),
    ],
)
SLEEP_LIGHT = action(
    "Dim the sleep light",
    "sleep light",
    [cmd("Set brightness to [level_value]", "sleep light", "switchLevel", "setLevel", ("integer", "[level_value]"))],
)
LOCK_DOOR = action("Lock the front door", "door lock", [cmd("Lock the door", "door lock", "lock", "lock")])
FAN_ALTERNATIVE = action(
    "Adjust fan speed",
    "fan",
    [
        cmd("Turn on fan", "fan", "switch", "on"),
        cmd("Set fan speed to [speed_value]", "fan", "fanSpeed", "setFanSpeed", ("integer", "[speed_value]")),
    ],
)
TV_OFF = action("Switch off the tv", "tv", [cmd("Turn off tv", "tv", "switch", "off")])
CLOSE_BLIND = action("Close the blind", "blind", [cmd("Close blind", "blind", "windowShade", "close")])
HALLWAY_ON = action("Turn on the hallway light", "hallway light", [cmd("Turn on hallway light", "hallway light", "switch", "on")])
HALLWAY_MOTION = trigger(
    "Detect hallway motion",
    "motion sensor",
    cond("Motion detected", "motion sensor", "motionSensor", "motion", "eq", ("string", "active")),
)

DRY_MODE_BAD = cmd("Set mode to dehumidify", "air conditioner", "airConditionerMode", "setAirConditionerMode", ("string", "dehumidify"))
DRY_MODE_FIXED = cmd("Set mode to dry", "air conditioner", "airConditionerMode", "setAirConditionerMode", ("string", "dry"))
HUMIDITY_BAD = cmd("Set humidity to 95", "humidifier", "humiditySetpoint", "setHumiditySetpoint", ("integer", 95))

DIRECT = "Direct Control Command"
RULE = "Trigger-Action Rule"
QUERY = "Device Query"

# Each task: id, type, instruction, rephrasing (None = reuse the original),
# whether the rephrasing should hit at task level, context keyword,
# subtasks, refine values / additions, ground truth, self-correction script.
TASKS = [
    {
        "id": "t01",
        "type": DIRECT,
        "text": "Make the bedroom ready for sleep",
        "rephrased": "Get my bedroom set up so I can fall asleep",
        "context": "sleeping",
        "subtasks": [ADJUST_AC, HUMIDIFIER, SLEEP_LIGHT],
        "values": {
            "Adjust air conditioner temperature": {"mode_value": "cool", "temperature_value": 20},
            "Set humidifier level": {"humidity_value": 45},
            "Dim the sleep light": {"level_value": 10},
            "Adjust fan speed": {"speed_value": 2},
        },
        # Re-decomposition once the air conditioner has been removed.
        "retry_subtasks": [FAN_ALTERNATIVE, HUMIDIFIER, SLEEP_LIGHT],
        "gt": [
            ("air conditioner", "switch", "on"),
            ("air conditioner", "airConditionerMode", "setAirConditionerMode"),
            ("air conditioner", "thermostatCoolingSetpoint", "setCoolingSetpoint"),
            ("humidifier", "switch", "on"),
            ("humidifier", "humiditySetpoint", "setHumiditySetpoint"),
            ("sleep light", "switchLevel", "setLevel"),
        ],
    },
    {
        "id": "t02",
        "type": DIRECT,
        "text": "Turn on the living room light",
        "rephrased": None,
        "context": "normal",
        "subtasks": [action("Switch on the living room light", "living room light", [cmd("Turn on light", "living room light", "switch", "on")])],
        "gt": [("living room light", "switch", "on")],
    },
    {
        "id": "t03",
        "type": DIRECT,
        "text": "Cool the bedroom down to 22 degrees",
        "rephrased": "I want the bedroom at 22 degrees",
        "context": "normal",
        "subtasks": [ADJUST_AC],
        "values": {"Adjust air conditioner temperature": {"mode_value": "cool", "temperature_value": 22}},
        "gt": [
            ("air conditioner", "switch", "on"),
            ("air conditioner", "airConditionerMode", "setAirConditionerMode"),
            ("air conditioner", "thermostatCoolingSetpoint", "setCoolingSetpoint"),
        ],
    },
    {
        "id": "t04",
        "type": DIRECT,
        "text": "Start a movie night in the living room",
        "rephrased": "Set things up so we can watch a film",
        "context": "movie",
        "subtasks": [
            action(
                "Dim the living room light",
                "living room light",
                [cmd("Set brightness to [level_value]", "living room light", "switchLevel", "setLevel", ("integer", "[level_value]"))],
            ),
            CLOSE_BLIND,
            action(
                "Turn on the tv at a comfortable volume",
                "tv",
                [
                    cmd("Turn on tv", "tv", "switch", "on"),
                    cmd("Set volume to [volume_value]", "tv", "audioVolume", "setVolume", ("integer", "[volume_value]")),
                ],
            ),
        ],
        "values": {
            "Dim the living room light": {"level_value": 20},
            "Turn on the tv at a comfortable volume": {"volume_value": 35},
        },
        "gt": [
            ("living room light", "switchLevel", "setLevel"),
            ("blind", "windowShade", "close"),
            ("tv", "switch", "on"),
            ("tv", "audioVolume", "setVolume"),
        ],
    },
    {
        "id": "t05",
        "type": DIRECT,
        "text": "Lock up the house for the night",
        "rephrased": "Secure every entrance before bed",
        "context": "sleeping",
        "subtasks": [
            LOCK_DOOR,
            action(
                "Close and lock the smart window",
                "smart window",
                [cmd("Close window", "smart window", "windowShade", "close"), cmd("Lock window", "smart window", "lock", "lock")],
            ),
            action("Turn on the home camera", "home camera", [cmd("Turn on camera", "home camera", "switch", "on")]),
        ],
        "gt": [
            ("door lock", "lock", "lock"),
            ("smart window", "windowShade", "close"),
            ("smart window", "lock", "lock"),
            ("home camera", "switch", "on"),
        ],
    },
    {
        "id": "t06",
        "type": DIRECT,
        "text": "Prepare the kitchen for cooking",
        "rephrased": "Get the kitchen ready so I can make dinner",
        "context": "cooking",
        "subtasks": [
            action(
                "Brighten the kitchen light",
                "kitchen light",
                [
                    cmd("Turn on kitchen light", "kitchen light", "switch", "on"),
                    cmd("Set brightness to [level_value]", "kitchen light", "switchLevel", "setLevel", ("integer", "[level_value]")),
                ],
            ),
            action(
                "Cool down the kitchen",
                "kitchen air conditioner",
                [
                    cmd("Turn on kitchen air conditioner", "kitchen air conditioner", "switch", "on"),
                    cmd(
                        "Set temperature to [temperature_value]",
                        "kitchen air conditioner",
                        "thermostatCoolingSetpoint",
                        "setCoolingSetpoint",
                        ("decimal", "[temperature_value]"),
                    ),
                ],
            ),
        ],
        "values": {
            "Brighten the kitchen light": {"level_value": 90},
            "Cool down the kitchen": {"temperature_value": 23},
        },
        "gt": [
            ("kitchen light", "switch", "on"),
            ("kitchen light", "switchLevel", "setLevel"),
            ("kitchen air conditioner", "switch", "on"),
            ("kitchen air conditioner", "thermostatCoolingSetpoint", "setCoolingSetpoint"),
        ],
    },
    {
        "id": "t07",
        "type": DIRECT,
        "text": "Turn off the tv",
        "rephrased": None,
        "context": "normal",
        "subtasks": [TV_OFF],
        "gt": [("tv", "switch", "off")],
    },
    {
        "id": "t08",
        "type": DIRECT,
        "text": "Put the air conditioner in dehumidify mode",
        "rephrased": "Switch the AC over to drying the air",
        "context": "normal",
        "subtasks": [action("Set air conditioner to dry mode", "air conditioner", [DRY_MODE_BAD])],
        "self_correct": {"subtask": 0, "command": 0, "replacement": DRY_MODE_FIXED},
        "gt": [("air conditioner", "airConditionerMode", "setAirConditionerMode")],
    },
    {
        "id": "t09",
        "type": DIRECT,
        "text": "Open the blind in the living room",
        "rephrased": "Open the living room blind",
        "task_hit": True,
        "context": "normal",
        "subtasks": [action("Open the blind", "blind", [cmd("Open blind", "blind", "windowShade", "open")])],
        "gt": [("blind", "windowShade", "open")],
    },
    {
        "id": "t10",
        "type": DIRECT,
        "text": "Make the living room bright for studying",
        "rephrased": "I need good light in here to study",
        "context": "studying",
        "subtasks": [
            action(
                "Raise the lamp brightness for reading",
                "living room light",
                [
                    cmd("Turn on light", "living room light", "switch", "on"),
                    cmd("Set brightness to [level_value]", "living room light", "switchLevel", "setLevel", ("integer", "[level_value]")),
                ],
            ),
            TV_OFF,
        ],
        "values": {"Raise the lamp brightness for reading": {"level_value": 95}},
        "gt": [("living room light", "switch", "on"), ("living room light", "switchLevel", "setLevel"), ("tv", "switch", "off")],
    },
    {
        "id": "t11",
        "type": DIRECT,
        "text": "Set the humidifier to 95 percent humidity",
        "rephrased": "Max out the humidifier at 95",
        "context": "normal",
        "subtasks": [
            action("Raise the humidifier setpoint", "humidifier", [cmd("Turn on humidifier", "humidifier", "switch", "on"), HUMIDITY_BAD])
        ],
        # Non-converging: the scripted correction repeats the invalid value.
        "self_correct": {"subtask": 0, "command": 1, "replacement": HUMIDITY_BAD},
        "gt": [("humidifier", "switch", "on"), ("humidifier", "humiditySetpoint", "setHumiditySetpoint")],
    },
    {
        "id": "r01",
        "type": RULE,
        "text": "Turn on the dining light when the fridge opens",
        "rephrased": "Whenever someone opens the fridge switch the dining lamp on",
        "context": "normal",
        "subtasks": [
            trigger("Detect fridge opening", "fridge", cond("Fridge door opened", "fridge", "contactSensor", "contact", "eq", ("string", "open"))),
            action("Turn on the dining light", "dining light", [cmd("Turn on dining light", "dining light", "switch", "on")]),
        ],
        "gt": [("dining light", "switch", "on")],
    },
    {
        "id": "r02",
        "type": RULE,
        "text": "When motion is detected in the hallway turn on the hallway light",
        "rephrased": "Light up the hallway if anyone walks through it",
        "context": "normal",
        "subtasks": [HALLWAY_MOTION, HALLWAY_ON],
        "gt": [("hallway light", "switch", "on")],
    },
    {
        "id": "r03",
        "type": RULE,
        "text": "If the living room gets hotter than 28 degrees turn on the fan",
        "rephrased": "Run the fan once it is above 28 degrees inside",
        "context": "normal",
        "subtasks": [
            trigger(
                "Detect high temperature",
                "thermostat",
                cond("Temperature above 28", "thermostat", "temperatureMeasurement", "temperature", "gt", ("decimal", 28.0)),
            ),
            action("Turn on the fan", "fan", [cmd("Turn on fan", "fan", "switch", "on")]),
        ],
        "gt": [("fan", "switch", "on")],
    },
    {
        "id": "r04",
        "type": RULE,
        "text": "Start recording with the home camera when motion is detected",
        "rephrased": "Have the camera come on if the motion sensor trips",
        "context": "normal",
        "subtasks": [HALLWAY_MOTION, action("Turn on the home camera", "home camera", [cmd("Turn on camera", "home camera", "switch", "on")])],
        "gt": [("home camera", "switch", "on")],
    },
    {
        "id": "r05",
        "type": RULE,
        "text": "When the front door is unlocked turn on the hallway light",
        "rephrased": "Switch the hallway lamp on as soon as the door gets unlocked",
        "context": "normal",
        "subtasks": [
            trigger("Detect door unlocking", "door lock", cond("Door unlocked", "door lock", "lock", "lock", "eq", ("string", "unlocked"))),
            HALLWAY_ON,
        ],
        "gt": [("hallway light", "switch", "on")],
    },
    {
        "id": "r06",
        "type": RULE,
        "text": "Close the blind whenever the smart window is unlocked",
        "rephrased": "If the window lock is released pull the blind down",
        "context": "normal",
        "subtasks": [
            trigger(
                "Detect window unlocking",
                "smart window",
                cond("Window unlocked", "smart window", "lock", "lock", "eq", ("string", "unlocked")),
            ),
            CLOSE_BLIND,
        ],
        "gt": [("blind", "windowShade", "close")],
    },
    {
        "id": "q01",
        "type": QUERY,
        "text": "What is the cooling setpoint of the thermostat",
        "rephrased": "Tell me the target temperature the thermostat is set to",
        "subtasks": [query("Read the thermostat cooling setpoint", "thermostat", "thermostatCoolingSetpoint", "coolingSetpoint")],
        "gt": [("thermostat", "thermostatCoolingSetpoint", "coolingSetpoint")],
    },
    {
        "id": "q02",
        "type": QUERY,
        "text": "What is the current temperature in the living room",
        "rephrased": "How warm is it in the living room right now",
        "subtasks": [query("Read the living room temperature", "thermostat", "temperatureMeasurement", "temperature")],
        "gt": [("thermostat", "temperatureMeasurement", "temperature")],
    },
    {
        "id": "q03",
        "type": QUERY,
        "text": "Is the front door locked",
        "rephrased": None,
        "subtasks": [query("Read the door lock state", "door lock", "lock", "lock")],
        "gt": [("door lock", "lock", "lock")],
    },
]

# Subtasks reachable only through preference additions or alternatives.
EXTRA_SUBTASKS = [FAN_ALTERNATIVE]
ALTERNATIVES = {"Adjust air conditioner temperature": [{"subtask": "Adjust fan speed", "device": "fan"}]}


# --------------------------------------------------------------------------
# Checks
# --------------------------------------------------------------------------


def check_similarities():
    originals = [t["text"] for t in TASKS]
    for i, a in enumerate(originals):
        for b in originals[i + 1 :]:
            s = cos(a, b)
            assert s < TAU_TASK - MARGIN, f"unintended task match {a!r} ~ {b!r} ({s:.3f})"
    for t in TASKS:
        r = t["rephrased"]
        if r is None:
            continue
        s = cos(t["text"], r)
        want_hit = t.get("task_hit", False)
        assert (s >= TAU_TASK + MARGIN) if want_hit else (s < TAU_TASK - MARGIN), f"{t['id']}: rephrasing similarity {s:.3f}, expected hit={want_hit}"
        for other in TASKS:
            if other is not t:
                s2 = cos(other["text"], r)
                assert s2 < TAU_TASK - MARGIN, f"{t['id']} rephrasing matches {other['id']} ({s2:.3f})"
    by_slot = {}
    for t in TASKS:
        for s in t["subtasks"]:
            by_slot.setdefault((s["device"], s["role"]), {})[s["subtask"]] = s
    for s in EXTRA_SUBTASKS:
        by_slot.setdefault((s["device"], s["role"]), {})[s["subtask"]] = s
    for (device, role), subs in by_slot.items():
        names = sorted(subs)
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                s = cos(a, b)
                assert s < TAU_SUBTASK - MARGIN, f"subtasks on {device}/{role} collide: {a!r} ~ {b!r} ({s:.3f})"


# --------------------------------------------------------------------------
# Writers
# --------------------------------------------------------------------------


def entry(stage, key, response):
    return {"stage": stage, "key": key, "response": response, "latency_ms": LATENCY_MS[stage]}


def decompose_response(t):
    name = t["text"]
    listing = lambda role: [{"subtask": s["subtask"], "device": s["device"]} for s in t["subtasks"] if s["role"] == role]
    if t["type"] == DIRECT:
        return {"CommandType": DIRECT, "Action": {"name": name, "possible subtask list": listing("action")}}
    if t["type"] == RULE:
        return {
            "CommandType": RULE,
            "Trigger": {"name": name, "possible subtask list": listing("trigger")},
            "Action": {"name": name, "possible subtask list": listing("action")},
        }
    return {
        "CommandType": QUERY,
        "Query": {
            "name": name,
            "attributes": [
                {"subtask": s["subtask"], "device": s["device"], "capability": s["capability"], "attribute": s["attribute"]}
                for s in t["subtasks"]
            ],
        },
    }


def build_playbook():
    entries = []
    seen = set()

    def add(e):
        k = (e["stage"], e["key"])
        if k in seen:
            assert next(x for x in entries if (x["stage"], x["key"]) == k)["response"] == e["response"], k
            return
        seen.add(k)
        entries.append(e)

    for t in TASKS:
        texts = [t["text"]] + ([t["rephrased"]] if t["rephrased"] else [])
        for text in texts:
            add(entry("Classify", text, t["type"]))
            add(entry("Decompose", text, decompose_response(t)))
            if "retry_subtasks" in t and text == t["text"]:
                add(entry("Decompose", f"retry: {text}", decompose_response({**t, "subtasks": t["retry_subtasks"]})))
            if t["type"] == QUERY:
                continue
            add(entry("ContextKeyword", text, t["context"]))
            add(entry("Refine", text, {"values": t.get("values", {}), "add": t.get("add", [])}))
            # Whole-instruction derivation for the no-decomposition ablation.
            add(entry("Derive", text, [s["derive"] for s in t["subtasks"]]))
            if "self_correct" in t:
                add(entry("SelfCorrect", text, {"revisions": [t["self_correct"]]}))
        for s in t["subtasks"]:
            if s["role"] != "query":
                add(entry("Derive", s["subtask"], s["derive"]))
    for s in EXTRA_SUBTASKS:
        add(entry("Derive", s["subtask"], s["derive"]))
    for desc, alts in ALTERNATIVES.items():
        add(entry("AlternativeSuggest", desc, {"alternatives": alts}))
    return {"model_id": "scripted", "default_behavior": "error", "entries": entries}


def build_dataset():
    lines = []
    for t in TASKS:
        row = {
            "task_id": t["id"],
            "instruction_text": t["text"],
            "instruction_type": t["type"],
            "ground_truth": [{"device": d, "capability": c, "command": m} for d, c, m in t["gt"]],
        }
        if t["rephrased"]:
            row["rephrased_text"] = t["rephrased"]
        lines.append(json.dumps(row))
    return "\n".join(lines) + "\n"


def log_command(rng, context):
    """One plausible command for a context, in derive wire shape."""
    pick = rng.choice
    if context == "sleeping":
        options = [
            lambda: cmd("Set temperature", "air conditioner", "thermostatCoolingSetpoint", "setCoolingSetpoint", ("decimal", float(pick([19, 20])))),
            lambda: cmd("Lock the door", "door lock", "lock", "lock"),
            lambda: cmd("Dim light", "sleep light", "switchLevel", "setLevel", ("integer", rng.randint(5, 25))),
            lambda: cmd("Set humidity", "humidifier", "humiditySetpoint", "setHumiditySetpoint", ("integer", rng.randint(40, 50))),
            lambda: cmd("Turn off tv", "tv", "switch", "off"),
        ]
    elif context == "studying":
        options = [
            lambda: cmd("Brighten light", "living room light", "switchLevel", "setLevel", ("integer", rng.randint(80, 100))),
            lambda: cmd("Mute speaker", "speaker", "audioVolume", "mute"),
            lambda: cmd("Set temperature", "air conditioner", "thermostatCoolingSetpoint", "setCoolingSetpoint", ("decimal", float(rng.randint(22, 24)))),
        ]
    elif context == "cooking":
        options = [
            lambda: cmd("Brighten light", "kitchen light", "switchLevel", "setLevel", ("integer", rng.randint(70, 100))),
            lambda: cmd("Set temperature", "kitchen air conditioner", "thermostatCoolingSetpoint", "setCoolingSetpoint", ("decimal", float(rng.randint(22, 24)))),
            lambda: cmd("Open window", "smart window", "windowShade", "open"),
        ]
    elif context == "movie":
        options = [
            lambda: cmd("Dim light", "living room light", "switchLevel", "setLevel", ("integer", rng.randint(10, 30))),
            lambda: cmd("Set volume", "tv", "audioVolume", "setVolume", ("integer", rng.randint(35, 60))),
            lambda: cmd("Close blind", "blind", "windowShade", "close"),
        ]
    elif context == "relaxing":
        options = [
            lambda: cmd("Set volume", "speaker", "audioVolume", "setVolume", ("integer", rng.randint(10, 30))),
            lambda: cmd("Set fan speed", "fan", "fanSpeed", "setFanSpeed", ("integer", rng.randint(1, 3))),
        ]
    else:
        options = [
            lambda: cmd("Turn on light", "living room light", "switch", "on"),
            lambda: cmd("Turn on tv", "tv", "switch", "on"),
            lambda: cmd("Open blind", "blind", "windowShade", "open"),
            lambda: cmd("Unlock the door", "door lock", "lock", "unlock"),
            lambda: cmd("Set temperature", "thermostat", "thermostatCoolingSetpoint", "setCoolingSetpoint", ("decimal", float(rng.randint(24, 26)))),
        ]
    return pick(options)()


def build_logs():
    rng = random.Random(20241014)
    plan = ["sleeping"] * 25 + ["studying"] * 15 + ["cooking"] * 15 + ["movie"] * 15 + ["relaxing"] * 10 + ["normal"] * 20
    rng.shuffle(plan)
    lines = []
    for tick, context in enumerate(plan, start=1):
        lines.append(json.dumps({"tick": tick, "context_keyword": context, "command": log_command(rng, context)}))
    assert len(lines) == 100
    return "\n".join(lines) + "\n"


def main():
    check_similarities()
    (ROOT / "dataset").mkdir(parents=True, exist_ok=True)
    (ROOT / "logs").mkdir(parents=True, exist_ok=True)
    (ROOT / "dataset" / "tasks.jsonl").write_text(build_dataset())
    (ROOT / "playbook.json").write_text(json.dumps(build_playbook(), indent=1) + "\n")
    (ROOT / "logs" / "interactions.jsonl").write_text(build_logs())
    counts = {}
    for t in TASKS:
        counts[t["type"]] = counts.get(t["type"], 0) + 1
    print("tasks:", counts)
    for t in TASKS:
        if t["rephrased"]:
            print(f"  {t['id']}: rephrasing similarity {cos(t['text'], t['rephrased']):.3f}")


if __name__ == "__main__":
    main()
