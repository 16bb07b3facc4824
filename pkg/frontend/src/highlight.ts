// Pure span math for the source panel. Segments partition the document
// text exactly, so rendering can never drift from the served offsets.

export interface HighlightSpan {
  instance_id: string;
  char_start: number;
  char_end: number;
}

export interface Segment {
  text: string;
  start: number;
  end: number;
  instanceIds: string[];
  selected: boolean;
}

export function buildSegments(
  text: string,
  highlights: HighlightSpan[],
  selectedInstanceId: string | null = null,
): Segment[] {
  const bounds = new Set<number>([0, text.length]);
  for (const span of highlights) {
    bounds.add(Math.max(0, Math.min(span.char_start, text.length)));
    bounds.add(Math.max(0, Math.min(span.char_end, text.length)));
  }
  const cuts = [...bounds].sort((a, b) => a - b);
  const segments: Segment[] = [];
  for (let i = 0; i + 1 < cuts.length; i += 1) {
    const [start, end] = [cuts[i], cuts[i + 1]];
    if (start === end) continue;
    const covering = highlights
      .filter((span) => span.char_start <= start && end <= span.char_end)
      .map((span) => span.instance_id);
    segments.push({
      text: text.slice(start, end),
      start,
      end,
      instanceIds: [...new Set(covering)],
      selected: selectedInstanceId !== null && covering.includes(selectedInstanceId),
    });
  }
  return segments;
}

export function firstHighlightStart(
  highlights: HighlightSpan[],
  instanceId: string,
): number | null {
  const own = highlights
    .filter((span) => span.instance_id === instanceId)
    .sort((a, b) => a.char_start - b.char_start);
  return own.length ? own[0].char_start : null;
}
