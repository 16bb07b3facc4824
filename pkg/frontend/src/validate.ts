// Client-side value validation mirroring the backend's typing rules, so
// obviously-invalid edits are blocked before a round trip.

import type { AttributeField, AttributeValue } from './api.js';

export interface ValidationResult {
  ok: boolean;
  value?: AttributeValue;
  error?: string;
}

export function canonicalText(text: string): string {
  return text.trim().toLowerCase().replace(/\s+/g, ' ');
}

export function canonicalValue(attributeName: string, text: string): string {
  let canon = canonicalText(text);
  if (attributeName === 'stage_value') canon = canon.replace(/ /g, '');
  return canon;
}

const TRUE_WORDS = new Set(['true', 'yes']);
const FALSE_WORDS = new Set(['false', 'no']);

function validCalendarDate(iso: string): boolean {
  const match = /^(\d{4})-(\d{2})-(\d{2})$/.exec(iso);
  if (!match) return false;
  const [year, month, day] = [Number(match[1]), Number(match[2]), Number(match[3])];
  const date = new Date(Date.UTC(year, month - 1, day));
  return (
    date.getUTCFullYear() === year &&
    date.getUTCMonth() === month - 1 &&
    date.getUTCDate() === day
  );
}

export function validateValue(field: AttributeField, raw: string): ValidationResult {
  const text = raw.trim();
  if (text === '') return { ok: true, value: null }; // cleared field = not found
  switch (field.kind) {
    case 'Date':
      if (!validCalendarDate(text)) {
        return { ok: false, error: `${field.name}: expected a YYYY-MM-DD calendar date` };
      }
      return { ok: true, value: text };
    case 'Integer':
      if (!/^[+-]?\d+$/.test(text)) {
        return { ok: false, error: `${field.name}: expected an integer` };
      }
      return { ok: true, value: Number(text) };
    case 'Decimal': {
      const value = Number(text);
      if (!Number.isFinite(value)) {
        return { ok: false, error: `${field.name}: expected a number` };
      }
      return { ok: true, value };
    }
    case 'Boolean': {
      const word = canonicalText(text);
      if (TRUE_WORDS.has(word)) return { ok: true, value: true };
      if (FALSE_WORDS.has(word)) return { ok: true, value: false };
      return { ok: false, error: `${field.name}: expected true/false` };
    }
    case 'Categorical': {
      const canon = canonicalValue(field.name, text);
      for (const member of field.values ?? []) {
        if (canonicalValue(field.name, member) === canon) {
          return { ok: true, value: member };
        }
      }
      return {
        ok: false,
        error: `${field.name}: "${text}" is not one of ${(field.values ?? []).join(', ')}`,
      };
    }
    case 'Text':
      return { ok: true, value: text };
  }
}

export function validateForm(
  fields: AttributeField[],
  raw: Record<string, string>,
): { ok: boolean; values: Record<string, AttributeValue>; errors: string[] } {
  const values: Record<string, AttributeValue> = {};
  const errors: string[] = [];
  for (const field of fields) {
    if (!(field.name in raw)) continue;
    const result = validateValue(field, raw[field.name]);
    if (result.ok) {
      values[field.name] = result.value ?? null;
    } else {
      errors.push(result.error ?? field.name);
    }
  }
  return { ok: errors.length === 0, values, errors };
}
