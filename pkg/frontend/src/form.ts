// Widget selection for the detail form: every attribute renders with a
// type-appropriate control derived from the served schema.

import type { AttributeField } from './api.js';

export type WidgetSpec =
  | { control: 'date' }
  | { control: 'number'; step: string }
  | { control: 'select'; options: string[] }
  | { control: 'checkbox' }
  | { control: 'text' };

export function widgetFor(field: AttributeField): WidgetSpec {
  switch (field.kind) {
    case 'Date':
      return { control: 'date' };
    case 'Integer':
      return { control: 'number', step: '1' };
    case 'Decimal':
      return { control: 'number', step: 'any' };
    case 'Categorical':
      return { control: 'select', options: field.values ?? [] };
    case 'Boolean':
      return { control: 'checkbox' };
    case 'Text':
      return { control: 'text' };
  }
}

export function valueToInput(value: unknown): string {
  if (value === null || value === undefined) return '';
  return String(value);
}
